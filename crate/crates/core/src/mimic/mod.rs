//! Set transformer that learns to emit a classifier for an episode.
//!
//! Each standardized support becomes a token (feature plus a learned
//! positive/negative indicator). One or two learned task tokens are
//! appended; after the encoder stack their outputs pass through a final
//! layer norm and a linear head:
//!
//! * [`MimicMode::PrototypeMimic`]: two task tokens regress the class means
//!   of the teacher, trained with `(1 - cos(p^, p)) + (1 - cos(n^, n))`.
//! * [`MimicMode::SvmMimic`]: one task token regresses the teacher SVM
//!   hyperplane `h = (w, b)`, trained with `1 - cos(h^, h)`.
//!
//! Teachers see every support plus the labeled queries; the student sees a
//! random subset of supports and, in some batches, two flipped labels.

pub mod transformer;

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{margin_score, prototype_classify, svm_fit, Hyperplane, Labeled, PrototypePair, SvmConfig};
use crate::episode::{split_supports, Episode, Label};
use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_grad_a};
use crate::normalize::{standardize, NormStats};
use crate::params::{fill, Init, ParamLayout};
use transformer::{Block, Dims, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicMode {
    PrototypeMimic,
    SvmMimic,
}

impl MimicMode {
    pub fn task_tokens(self) -> usize {
        match self {
            MimicMode::PrototypeMimic => 2,
            MimicMode::SvmMimic => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimicConfig {
    pub mode: MimicMode,
    pub depth: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Must equal the feature dimension.
    pub token_dim: usize,
    pub mlp_dim: usize,
}

impl Default for MimicConfig {
    fn default() -> Self {
        MimicConfig::desk(MimicMode::SvmMimic, 64)
    }
}

impl MimicConfig {
    /// Six blocks, eight heads of width 64, token and MLP width `dim`.
    pub fn full(mode: MimicMode, dim: usize) -> MimicConfig {
        MimicConfig {
            mode,
            depth: 6,
            heads: 8,
            head_dim: 64,
            token_dim: dim,
            mlp_dim: dim,
        }
    }

    /// A CPU-sized configuration used by the default training runs.
    pub fn desk(mode: MimicMode, dim: usize) -> MimicConfig {
        MimicConfig {
            mode,
            depth: 2,
            heads: 4,
            head_dim: 16,
            token_dim: dim,
            mlp_dim: dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.mode {
            MimicMode::PrototypeMimic => self.token_dim,
            MimicMode::SvmMimic => self.token_dim + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("token_dim and mlp_dim must be positive".into()));
        }
        if self.depth > 0 && (self.heads == 0 || self.head_dim == 0) {
            return Err(Error::Config("heads and head_dim must be positive".into()));
        }
        Ok(())
    }

    fn dims(&self) -> Dims {
        Dims {
            d: self.token_dim,
            heads: self.heads,
            head_dim: self.head_dim,
            mlp: self.mlp_dim,
        }
    }
}

/// Teacher or student output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MimicTargets {
    Prototypes(PrototypePair),
    /// `(w, b)` concatenated, length `D + 1`.
    Hyperplane(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimicModel {
    pub config: MimicConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
    ind_pos: Range<usize>,
    ind_neg: Range<usize>,
    task: Range<usize>,
    blocks: Vec<Block>,
    out_ln: LayerNorm,
    head: Linear,
}

/// Token matrix `t x d` plus the row where task tokens begin.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokens {
    pub data: Vec<f64>,
    pub rows: usize,
    pub first_task: usize,
}

pub const EMBED_INIT_STD: f64 = 0.02;

impl MimicModel {
    fn skeleton(config: MimicConfig) -> Result<MimicModel> {
        config.validate()?;
        let d = config.token_dim;
        let mut layout = ParamLayout::default();
        let ind_pos = layout.push("indicator.pos", &[d]);
        let ind_neg = layout.push("indicator.neg", &[d]);
        let task = layout.push("task_tokens", &[config.mode.task_tokens(), d]);
        let blocks = (0..config.depth)
            .map(|l| Block::push(&mut layout, &format!("blocks.{l}"), config.dims()))
            .collect();
        let out_ln = LayerNorm::push(&mut layout, "out.ln", d);
        let head = Linear::push(&mut layout, "out.head", d, config.out_dim());
        let data = vec![0.0; layout.len()];
        Ok(MimicModel {
            config,
            layout,
            data,
            ind_pos,
            ind_neg,
            task,
            blocks,
            out_ln,
            head,
        })
    }

    pub fn init<R: Rng + ?Sized>(config: MimicConfig, rng: &mut R) -> Result<MimicModel> {
        let mut m = MimicModel::skeleton(config)?;
        let data = &mut m.data;
        for r in [&m.ind_pos, &m.ind_neg, &m.task] {
            fill(&mut data[r.clone()], Init::Normal(EMBED_INIT_STD), rng);
        }
        let linears = m
            .blocks
            .iter()
            .flat_map(|b| [&b.q, &b.k, &b.v, &b.o, &b.fc1, &b.fc2]);
        for lin in linears {
            fill(&mut data[lin.w.clone()], Init::FanIn(lin.fan_in), rng);
        }
        let norms = m.blocks.iter().flat_map(|b| [&b.ln1, &b.ln2]).chain([&m.out_ln]);
        for ln in norms {
            fill(&mut data[ln.gamma.clone()], Init::Ones, rng);
        }
        fill(&mut data[m.head.w.clone()], Init::Normal(EMBED_INIT_STD), rng);
        Ok(m)
    }

    /// Rebuild from a stored layout and payload; the layout must match
    /// what `config` produces.
    pub fn from_parts(config: MimicConfig, layout: &ParamLayout, data: Vec<f64>) -> Result<MimicModel> {
        let mut m = MimicModel::skeleton(config)?;
        if &m.layout != layout {
            return Err(Error::Shape(format!(
                "stored parameter layout ({} values) does not match a {:?} model with {} values",
                layout.len(),
                config.mode,
                m.layout.len()
            )));
        }
        if data.len() != m.data.len() {
            return Err(Error::Shape(format!(
                "payload has {} values, layout needs {}",
                data.len(),
                m.data.len()
            )));
        }
        m.data = data;
        Ok(m)
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn indicator(&self, label: Label) -> &[f64] {
        match label {
            Label::Positive => &self.data[self.ind_pos.clone()],
            Label::Negative => &self.data[self.ind_neg.clone()],
        }
    }

    pub fn indicators_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (a, b) = self.data.split_at_mut(self.ind_neg.start);
        (&mut a[self.ind_pos.clone()], &mut b[..self.ind_neg.len()])
    }

    /// Support tokens (feature + label indicator) followed by task tokens.
    pub fn assemble_student_input(&self, supports: &[Labeled<'_>]) -> Result<Tokens> {
        self.assemble_with(&self.data, supports)
    }

    fn assemble_with(&self, data: &[f64], supports: &[Labeled<'_>]) -> Result<Tokens> {
        let d = self.config.token_dim;
        let n_task = self.config.mode.task_tokens();
        let mut out = Vec::with_capacity((supports.len() + n_task) * d);
        for (f, label) in supports {
            if f.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: f.len(),
                });
            }
            let ind = match label {
                Label::Positive => &data[self.ind_pos.clone()],
                Label::Negative => &data[self.ind_neg.clone()],
            };
            out.extend(f.iter().zip(ind).map(|(x, i)| x + i));
        }
        out.extend_from_slice(&data[self.task.clone()]);
        Ok(Tokens {
            data: out,
            rows: supports.len() + n_task,
            first_task: supports.len(),
        })
    }

    /// Run the encoder stack; returns one output vector per token.
    pub fn transformer_forward(&self, tokens: &Tokens) -> Result<Vec<f64>> {
        if tokens.data.len() != tokens.rows * self.config.token_dim {
            return Err(Error::Shape(format!(
                "{} token values for {} rows of width {}",
                tokens.data.len(),
                tokens.rows,
                self.config.token_dim
            )));
        }
        let mut x = tokens.data.clone();
        for b in &self.blocks {
            b.forward(&self.data, self.config.dims(), &mut x, tokens.rows);
        }
        Ok(x)
    }

    /// Raw head outputs (one row of `out_dim` per task token) plus the
    /// caches needed for the backward pass.
    fn forward_full(&self, data: &[f64], supports: &[Labeled<'_>]) -> Result<Forward> {
        let tokens = self.assemble_with(data, supports)?;
        let dims = self.config.dims();
        let t = tokens.rows;
        let mut x = tokens.data;
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            caches.push(b.forward(data, dims, &mut x, t));
        }
        let d = self.config.token_dim;
        let task_rows = &x[tokens.first_task * d..];
        let (normed, ln_cache) = self.out_ln.forward(data, task_rows);
        let n_task = self.config.mode.task_tokens();
        let out = self.head.forward(data, &normed, n_task);
        Ok(Forward {
            out,
            normed,
            ln_cache,
            caches,
            rows: t,
            first_task: tokens.first_task,
        })
    }

    fn targets_from_out(&self, out: Vec<f64>) -> MimicTargets {
        match self.config.mode {
            MimicMode::SvmMimic => MimicTargets::Hyperplane(out),
            MimicMode::PrototypeMimic => {
                let d = self.config.token_dim;
                MimicTargets::Prototypes(PrototypePair {
                    p: out[..d].to_vec(),
                    n: out[d..].to_vec(),
                })
            }
        }
    }

    /// Student prediction from supports only.
    pub fn predict_targets(&self, supports: &[Labeled<'_>]) -> Result<MimicTargets> {
        let f = self.forward_full(&self.data, supports)?;
        Ok(self.targets_from_out(f.out))
    }

    /// Mimic loss of the student on `supports` against `teacher`.
    pub fn loss(&self, supports: &[Labeled<'_>], teacher: &MimicTargets) -> Result<f64> {
        self.loss_at(&self.data, supports, teacher)
    }

    /// As [`MimicModel::loss`] but with parameters taken from `data`.
    pub fn loss_at(&self, data: &[f64], supports: &[Labeled<'_>], teacher: &MimicTargets) -> Result<f64> {
        let f = self.forward_full(data, supports)?;
        let (loss, _) = self.loss_and_dout(&f.out, teacher)?;
        Ok(loss)
    }

    fn loss_and_dout(&self, out: &[f64], teacher: &MimicTargets) -> Result<(f64, Vec<f64>)> {
        match (self.config.mode, teacher) {
            (MimicMode::SvmMimic, MimicTargets::Hyperplane(h)) => {
                let loss = mimic_loss_svm(out, h)?;
                let d_out = cosine_grad_a(out, h).into_iter().map(|g| -g).collect();
                Ok((loss, d_out))
            }
            (MimicMode::PrototypeMimic, MimicTargets::Prototypes(pp)) => {
                let d = self.config.token_dim;
                let (ph, nh) = out.split_at(d);
                let loss = mimic_loss_prototype(ph, nh, &pp.p, &pp.n)?;
                let d_out = cosine_grad_a(ph, &pp.p)
                    .into_iter()
                    .chain(cosine_grad_a(nh, &pp.n))
                    .map(|g| -g)
                    .collect();
                Ok((loss, d_out))
            }
            _ => Err(Error::Shape(format!(
                "teacher target kind does not match {:?}",
                self.config.mode
            ))),
        }
    }

    /// Loss and gradient with respect to every parameter.
    pub fn loss_and_grad(&self, supports: &[Labeled<'_>], teacher: &MimicTargets) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.data.len()];
        let loss = self.accumulate_grad(supports, teacher, 1.0, &mut grad)?;
        Ok((loss, grad))
    }

    /// Adds `scale * d loss / d params` into `grad`; returns the loss.
    pub fn accumulate_grad(
        &self,
        supports: &[Labeled<'_>],
        teacher: &MimicTargets,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let data = &self.data;
        let f = self.forward_full(data, supports)?;
        let (loss, mut d_out) = self.loss_and_dout(&f.out, teacher)?;
        d_out.iter_mut().for_each(|g| *g *= scale);
        let d = self.config.token_dim;
        let n_task = self.config.mode.task_tokens();
        let d_normed = self.head.backward(data, &f.normed, &d_out, n_task, grad);
        let d_task = self.out_ln.backward(data, &f.ln_cache, &d_normed, grad);
        let mut dx = vec![0.0; f.rows * d];
        dx[f.first_task * d..].copy_from_slice(&d_task);
        let dims = self.config.dims();
        for (b, c) in self.blocks.iter().zip(&f.caches).rev() {
            b.backward(data, dims, c, &mut dx, f.rows, grad);
        }
        // token gradients flow into indicators and task tokens
        for (i, (_, label)) in supports.iter().enumerate() {
            let r = match label {
                Label::Positive => self.ind_pos.clone(),
                Label::Negative => self.ind_neg.clone(),
            };
            grad[r].iter_mut().zip(&dx[i * d..(i + 1) * d]).for_each(|(g, x)| *g += x);
        }
        grad[self.task.clone()]
            .iter_mut()
            .zip(&dx[f.first_task * d..])
            .for_each(|(g, x)| *g += x);
        Ok(loss)
    }
}

struct Forward {
    out: Vec<f64>,
    normed: Vec<f64>,
    ln_cache: transformer::LnCache,
    caches: Vec<transformer::BlockCache>,
    rows: usize,
    first_task: usize,
}

/// Supports and labeled queries of an episode, queries joined to their class.
fn teacher_set(e: &Episode) -> Vec<Labeled<'_>> {
    let mut s = e.labeled_supports();
    s.extend(e.queries.iter().map(|q| (q.features.as_slice(), q.label)));
    s
}

/// Class means over supports plus labeled queries. Expects a standardized
/// episode.
pub fn teacher_prototypes(e: &Episode) -> Result<PrototypePair> {
    PrototypePair::fit(&teacher_set(e))
}

/// SVM over supports plus labeled queries, as `(w, b)`.
pub fn teacher_hyperplane(e: &Episode, cfg: &SvmConfig) -> Result<Vec<f64>> {
    Ok(svm_fit(&teacher_set(e), cfg)?.hyperplane.to_concat())
}

pub fn teacher_targets(e: &Episode, mode: MimicMode, cfg: &SvmConfig) -> Result<MimicTargets> {
    match mode {
        MimicMode::PrototypeMimic => teacher_prototypes(e).map(MimicTargets::Prototypes),
        MimicMode::SvmMimic => teacher_hyperplane(e, cfg).map(MimicTargets::Hyperplane),
    }
}

/// Keep `m ~ U{2..K}` supports per class.
pub fn support_dropout<R: Rng + ?Sized>(e: &Episode, rng: &mut R) -> Result<Episode> {
    let k = e.positives.len().min(e.negatives.len());
    let m = rng.random_range(2..=k.max(2));
    split_supports(e, m, rng)
}

/// When `gate` is set, flip exactly one positive and one negative label,
/// each chosen uniformly within its class.
pub fn apply_label_noise<R: Rng + ?Sized>(labels: &[Label], rng: &mut R, gate: bool) -> Vec<Label> {
    let mut out = labels.to_vec();
    if !gate {
        return out;
    }
    for class in [Label::Positive, Label::Negative] {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let pick = idx[rng.random_range(0..idx.len())];
        out[pick] = class.flipped();
    }
    out
}

/// Express a rule given in standardized coordinates in the coordinates
/// obtained by standardizing again with `stats` (computed in the first
/// standardized space). The decision function is unchanged.
pub fn restate_targets(t: &MimicTargets, stats: &NormStats) -> Result<MimicTargets> {
    let d = stats.dim();
    match t {
        MimicTargets::Hyperplane(h) => {
            if h.len() != d + 1 {
                return Err(Error::DimensionMismatch {
                    expected: d + 1,
                    found: h.len(),
                });
            }
            let mut out: Vec<f64> = h[..d].iter().zip(&stats.sigma).map(|(w, s)| w * s).collect();
            let shift: f64 = h[..d].iter().zip(&stats.mu).map(|(w, m)| w * m).sum();
            out.push(h[d] + shift);
            Ok(MimicTargets::Hyperplane(out))
        }
        MimicTargets::Prototypes(pp) => Ok(MimicTargets::Prototypes(PrototypePair {
            p: standardize(&pp.p, stats)?,
            n: standardize(&pp.n, stats)?,
        })),
    }
}

pub fn mimic_loss_prototype(p_hat: &[f64], n_hat: &[f64], p: &[f64], n: &[f64]) -> Result<f64> {
    Ok((1.0 - cosine(p_hat, p)?) + (1.0 - cosine(n_hat, n)?))
}

pub fn mimic_loss_svm(h_hat: &[f64], h: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(h_hat, h)?)
}

/// Score a standardized query against a predicted rule.
pub fn mimic_classify(targets: &MimicTargets, query: &[f64]) -> Result<(Label, f64)> {
    match targets {
        MimicTargets::Hyperplane(h) => {
            let hp = Hyperplane::from_concat(h)?;
            let s = margin_score(&hp, query)?;
            Ok((Label::from_score(s), s))
        }
        MimicTargets::Prototypes(pp) => prototype_classify(pp, query),
    }
}
