//! Evaluation of classifiers on episode splits, robustness sweeps and
//! CSV/markdown reports.
//!
//! Accuracy is the fraction of queries labeled correctly, each query
//! counted on its own. Episodes whose fit fails (solver failure, zero-norm
//! rule) are skipped: they leave numerator and denominator alone and their
//! ids are reported.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::load_mimic;
use crate::classifiers::{
    knn_classify, margin_score, prototype_classify, prototype_fit, svm_fit, SvmConfig, DEFAULT_K,
};
use crate::episode::{split_supports, Dataset, Episode, Label};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::mimic::{mimic_classify, teacher_hyperplane, MimicMode, MimicModel, MimicTargets};
use crate::normalize::{standardize_episode, trainset_stats, NormStats, Normalization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Knn,
    Prototype,
    Svm,
    PrototypeMimic,
    SvmMimic,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Knn,
        Method::Prototype,
        Method::Svm,
        Method::PrototypeMimic,
        Method::SvmMimic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Prototype => "prototype",
            Method::Svm => "svm",
            Method::PrototypeMimic => "prototype_mimic",
            Method::SvmMimic => "svm_mimic",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown method `{s}`")))
    }

    pub fn mimic_mode(self) -> Option<MimicMode> {
        match self {
            Method::PrototypeMimic => Some(MimicMode::PrototypeMimic),
            Method::SvmMimic => Some(MimicMode::SvmMimic),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodSpec {
    pub method: Method,
    pub normalization: Normalization,
    /// Neighbours for kNN.
    pub k: usize,
    pub svm: SvmConfig,
    /// Required by the mimic methods.
    pub checkpoint: Option<PathBuf>,
}

impl Default for MethodSpec {
    fn default() -> Self {
        MethodSpec {
            method: Method::Prototype,
            normalization: Normalization::SupportStandardize,
            k: DEFAULT_K,
            svm: SvmConfig::default(),
            checkpoint: None,
        }
    }
}

impl MethodSpec {
    pub fn new(method: Method, normalization: Normalization) -> MethodSpec {
        MethodSpec {
            method,
            normalization,
            ..Default::default()
        }
    }
}

/// A method ready to run: checkpoint loaded, train-set statistics computed.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub spec: MethodSpec,
    model: Option<MimicModel>,
    trainset: Option<NormStats>,
}

impl Evaluator {
    /// Resolve `spec` against `dataset`, loading the checkpoint if needed.
    pub fn new(spec: MethodSpec, dataset: &Dataset) -> Result<Evaluator> {
        let model = match spec.method.mimic_mode() {
            Some(_) => {
                let path = spec.checkpoint.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("method `{}` needs a checkpoint", spec.method))
                })?;
                Some(load_mimic(path)?)
            }
            None => None,
        };
        Evaluator::build(spec, model, dataset)
    }

    /// As [`Evaluator::new`] with an in-memory mimic model.
    pub fn with_model(spec: MethodSpec, model: MimicModel, dataset: &Dataset) -> Result<Evaluator> {
        Evaluator::build(spec, Some(model), dataset)
    }

    fn build(spec: MethodSpec, model: Option<MimicModel>, dataset: &Dataset) -> Result<Evaluator> {
        if let (Some(mode), Some(m)) = (spec.method.mimic_mode(), &model) {
            if m.config.mode != mode {
                return Err(Error::Shape(format!(
                    "method `{}` given a {:?} checkpoint",
                    spec.method, m.config.mode
                )));
            }
        }
        let trainset = if spec.normalization.needs_trainset_stats() {
            Some(trainset_stats(dataset)?)
        } else {
            None
        };
        Ok(Evaluator { spec, model, trainset })
    }

    /// Fit on supports and score each query, in query order.
    pub fn classify_episode(&self, e: &Episode) -> Result<Vec<(Label, f64)>> {
        let e = self.spec.normalization.apply(e, self.trainset.as_ref())?;
        let supports = e.labeled_supports();
        let queries = e.queries.iter().map(|q| q.features.as_slice());
        match self.spec.method {
            Method::Knn => queries
                .map(|q| knn_classify(&supports, q, self.spec.k).map(|l| (l, l.sign())))
                .collect(),
            Method::Prototype => {
                let pp = prototype_fit(&e)?;
                queries.map(|q| prototype_classify(&pp, q)).collect()
            }
            Method::Svm => {
                let fit = svm_fit(&supports, &self.spec.svm)?;
                queries
                    .map(|q| margin_score(&fit.hyperplane, q).map(|s| (Label::from_score(s), s)))
                    .collect()
            }
            Method::PrototypeMimic | Method::SvmMimic => {
                let model = self.model.as_ref().expect("mimic model resolved");
                let t = model.predict_targets(&supports)?;
                queries.map(|q| mimic_classify(&t, q)).collect()
            }
        }
    }

    pub fn evaluate(&self, dataset: &Dataset, split: &str) -> Result<EvalReport> {
        let episodes: Vec<&Episode> = dataset.split(split).collect();
        self.evaluate_episodes(&episodes, split)
    }

    /// Evaluate an explicit episode list (e.g. a perturbed copy of a split).
    pub fn evaluate_episodes(&self, episodes: &[&Episode], split: &str) -> Result<EvalReport> {
        let start = Instant::now();
        let mut order: Vec<&Episode> = episodes.to_vec();
        order.sort_by(|a, b| a.id.cmp(&b.id));
        let mut scores = Vec::with_capacity(order.len());
        let mut skipped = Vec::new();
        let (mut correct, mut total) = (0usize, 0usize);
        for e in order {
            match self.classify_episode(e) {
                Ok(out) => {
                    let c = out.iter().zip(&e.queries).filter(|((l, _), q)| *l == q.label).count();
                    correct += c;
                    total += out.len();
                    scores.push(EpisodeScore {
                        id: e.id.clone(),
                        correct: c,
                        queries: out.len(),
                        scores: out.into_iter().map(|(_, s)| s).collect(),
                    });
                }
                Err(err @ (Error::SvmNotConverged { .. } | Error::ZeroNorm(_) | Error::NonFinite(_))) => {
                    log::warn!("episode `{}` skipped: {err}", e.id);
                    skipped.push(e.id.clone());
                }
                Err(err) => return Err(err),
            }
        }
        Ok(EvalReport {
            method: self.spec.method,
            normalization: self.spec.normalization,
            split: split.to_string(),
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            correct,
            total,
            skipped,
            episodes: scores,
            runtime_secs: start.elapsed().as_secs_f64(),
            config: serde_json::to_value(&self.spec).expect("spec serializes"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub id: String,
    pub correct: usize,
    pub queries: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub normalization: Normalization,
    pub split: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub skipped: Vec<String>,
    pub episodes: Vec<EpisodeScore>,
    pub runtime_secs: f64,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Report without the timing, for bit-exact comparisons.
    pub fn without_runtime(&self) -> EvalReport {
        EvalReport {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SupportCount,
    LabelNoise,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "support_count" => Ok(SweepAxis::SupportCount),
            "label_noise" => Ok(SweepAxis::LabelNoise),
            _ => Err(Error::InvalidArgument(format!("unknown sweep axis `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::SupportCount => "support_count",
            SweepAxis::LabelNoise => "label_noise",
        }
    }
}

pub const SWEEP_DRAWS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub level: usize,
    pub mean: f64,
    pub std: Option<f64>,
    pub accuracies: Vec<f64>,
}

/// Swap `flips` positives with `flips` negatives, so that many supports of
/// each class carry the wrong label. Queries are untouched.
pub fn flip_support_labels<R: Rng + ?Sized>(e: &Episode, flips: usize, rng: &mut R) -> Result<Episode> {
    let k = e.positives.len().min(e.negatives.len());
    if 2 * flips >= k.max(1) && flips > 0 {
        return Err(Error::InvalidArgument(format!(
            "label-noise level {flips} must be below K/2 = {}",
            k as f64 / 2.0
        )));
    }
    let mut out = e.clone();
    let mut pi = sample(rng, e.positives.len(), flips).into_vec();
    let mut ni = sample(rng, e.negatives.len(), flips).into_vec();
    pi.sort_unstable();
    ni.sort_unstable();
    for (&p, &n) in pi.iter().zip(&ni) {
        std::mem::swap(&mut out.positives[p], &mut out.negatives[n]);
    }
    Ok(out)
}

fn perturb_seed(seed: u64, draw: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((draw as u64) << 40) ^ index as u64
}

/// Accuracy at each level, three random draws per level.
pub fn robustness_sweep(
    ev: &Evaluator,
    dataset: &Dataset,
    split: &str,
    axis: SweepAxis,
    levels: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let episodes: Vec<&Episode> = dataset.split(split).collect();
    let k = episodes.iter().map(|e| e.k()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        match axis {
            SweepAxis::SupportCount if level < 2 || level > k => {
                return Err(Error::InvalidArgument(format!(
                    "support count {level} outside [2, {k}]"
                )))
            }
            SweepAxis::LabelNoise if level > 0 && 2 * level >= k => {
                return Err(Error::InvalidArgument(format!(
                    "label-noise level {level} must be below K/2 = {}",
                    k as f64 / 2.0
                )))
            }
            _ => {}
        }
        let mut accs = Vec::with_capacity(SWEEP_DRAWS);
        for draw in 0..SWEEP_DRAWS {
            let perturbed = episodes
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(perturb_seed(seed, draw, i));
                    match axis {
                        SweepAxis::SupportCount => split_supports(e, level, &mut rng),
                        SweepAxis::LabelNoise => flip_support_labels(e, level, &mut rng),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Episode> = perturbed.iter().collect();
            accs.push(ev.evaluate_episodes(&refs, split)?.accuracy);
        }
        let (mean, std) = mean_std(&accs);
        rows.push(SweepRow {
            level,
            mean,
            std,
            accuracies: accs,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

/// Mean cosine between the student hyperplane on all supports and the
/// teacher hyperplane, over the standardized episodes of `split`.
pub fn mimic_fidelity(model: &MimicModel, dataset: &Dataset, split: &str, svm: &SvmConfig) -> Result<f64> {
    if model.config.mode != MimicMode::SvmMimic {
        return Err(Error::InvalidArgument("fidelity is defined for svm_mimic".into()));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for e in dataset.split(split) {
        let (s, _) = standardize_episode(e)?;
        let h = match teacher_hyperplane(&s, svm) {
            Ok(h) => h,
            Err(err) => {
                log::warn!("fidelity: teacher failed on `{}`: {err}", e.id);
                continue;
            }
        };
        let MimicTargets::Hyperplane(hh) = model.predict_targets(&s.labeled_supports())? else {
            unreachable!("svm mode yields a hyperplane")
        };
        total += cosine(&hh, &h)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::TooFew {
            what: "episodes with a teacher",
            needed: 1,
            found: 0,
        });
    }
    Ok(total / n as f64)
}

/// Copy of `dataset` with every query label replaced by a fair coin.
pub fn randomize_query_labels(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut episodes = dataset.episodes.clone();
    for e in &mut episodes {
        for q in &mut e.queries {
            q.label = if rng.random_bool(0.5) { Label::Positive } else { Label::Negative };
        }
    }
    Dataset::new(episodes)
}

/// One aggregated row: a (method, normalization, split) cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub normalization: String,
    pub split: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: Option<f64>,
    pub queries: usize,
    pub skipped: usize,
}

/// Group reports by (method, normalization, split) in first-seen order.
pub fn aggregate(reports: &[EvalReport]) -> Vec<ReportRow> {
    let mut keys: Vec<(Method, Normalization, String)> = Vec::new();
    for r in reports {
        let key = (r.method, r.normalization, r.split.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(m, n, s)| {
            let group: Vec<&EvalReport> = reports
                .iter()
                .filter(|r| r.method == m && r.normalization == n && r.split == s)
                .collect();
            let accs: Vec<f64> = group.iter().map(|r| r.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            ReportRow {
                method: m.name().into(),
                normalization: n.name().into(),
                split: s,
                runs: group.len(),
                mean_accuracy: mean,
                std_accuracy: std,
                queries: group.iter().map(|r| r.total).sum(),
                skipped: group.iter().map(|r| r.skipped.len()).sum(),
            }
        })
        .collect()
}

pub fn write_csv(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("csv: {other:?}"),
        },
    }
}

pub fn markdown_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| method | normalization | split | runs | accuracy | queries | skipped |\n|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let acc = match r.std_accuracy {
            Some(sd) => format!("{:.4} ± {:.4}", r.mean_accuracy, sd),
            None => format!("{:.4}", r.mean_accuracy),
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            r.method, r.normalization, r.split, r.runs, acc, r.queries, r.skipped
        ));
    }
    s
}

pub fn write_markdown(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, markdown_table(rows))?;
    Ok(())
}

pub fn sweep_markdown(method: &str, axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("| method | {} | accuracy | draws |\n|---|---|---|---|\n", axis.name());
    for r in rows {
        let acc = match r.std {
            Some(sd) => format!("{:.4} ± {:.4}", r.mean, sd),
            None => format!("{:.4}", r.mean),
        };
        s.push_str(&format!("| {method} | {} | {acc} | {} |\n", r.level, r.accuracies.len()));
    }
    s
}

pub fn write_sweep_csv(method: &str, axis: SweepAxis, rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["method", "axis", "level", "mean_accuracy", "std_accuracy", "draws"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            method.to_string(),
            axis.name().to_string(),
            r.level.to_string(),
            r.mean.to_string(),
            r.std.map(|v| v.to_string()).unwrap_or_default(),
            r.accuracies.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
