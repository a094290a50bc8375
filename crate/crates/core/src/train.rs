//! Training loops for the mimic transformer and the contrastive encoder.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifiers::{Labeled, SvmConfig};
use crate::encoder::{encoder_train_step, episode_loss_grad, EncoderParams, EncoderShape};
use crate::episode::{split_supports, Dataset, Episode, Label, TRAIN_SPLIT};
use crate::error::{Error, Result};
use crate::mimic::{apply_label_noise, restate_targets, teacher_targets, MimicConfig, MimicModel, MimicTargets};
use crate::normalize::standardize_episode;
use crate::optim::{gradient_check, onecycle_lr, AdamW, GradCheck, TrainConfig};

/// One row of a loss curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MimicRun {
    pub model: MimicModel,
    pub curve: Vec<CurvePoint>,
    /// Ids of train episodes whose teacher could not be computed.
    pub skipped: Vec<String>,
}

/// A standardized train episode with its clean teacher targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherExample {
    pub episode: Episode,
    pub teacher: MimicTargets,
}

/// Standardize every train episode and compute its teacher. Failures are
/// logged and returned as skipped ids.
pub fn prepare_teachers(
    dataset: &Dataset,
    mode: crate::mimic::MimicMode,
    svm: &SvmConfig,
) -> (Vec<TeacherExample>, Vec<String>) {
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for e in dataset.split(TRAIN_SPLIT) {
        let made = standardize_episode(e).and_then(|(s, _)| {
            let teacher = teacher_targets(&s, mode, svm)?;
            Ok(TeacherExample { episode: s, teacher })
        });
        match made {
            Ok(t) => out.push(t),
            Err(err) => {
                log::warn!("skipping train episode `{}`: {err}", e.id);
                skipped.push(e.id.clone());
            }
        }
    }
    (out, skipped)
}

/// Student input for one example: optional support dropout (the kept
/// subset is standardized again and the teacher restated in its
/// coordinates) and optional label noise.
pub fn student_example<R: Rng + ?Sized>(
    ex: &TeacherExample,
    dropout: bool,
    noise: bool,
    rng: &mut R,
) -> Result<(Vec<(Vec<f64>, Label)>, MimicTargets)> {
    let k = ex.episode.k();
    let mut teacher = ex.teacher.clone();
    let mut e = ex.episode.clone();
    if dropout {
        let m = rng.random_range(2..=k.max(2));
        if m < k {
            let sub = split_supports(&e, m, rng)?;
            let (sub_std, stats) = standardize_episode(&sub)?;
            teacher = restate_targets(&teacher, &stats)?;
            e = sub_std;
        }
    }
    let labeled = e.labeled_supports();
    let labels: Vec<Label> = labeled.iter().map(|(_, l)| *l).collect();
    let noisy = apply_label_noise(&labels, rng, noise);
    let supports = labeled
        .iter()
        .zip(noisy)
        .map(|((f, _), l)| (f.to_vec(), l))
        .collect();
    Ok((supports, teacher))
}

pub fn train_mimic(
    dataset: &Dataset,
    config: MimicConfig,
    train: &TrainConfig,
    svm: &SvmConfig,
) -> Result<MimicRun> {
    train.validate()?;
    if dataset.dim != config.token_dim {
        return Err(Error::DimensionMismatch {
            expected: config.token_dim,
            found: dataset.dim,
        });
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = MimicModel::init(config, &mut init_rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5EED_0F_7EAC4E);
    let (examples, skipped) = prepare_teachers(dataset, config.mode, svm);
    if train.total_steps > 0 && examples.is_empty() {
        return Err(Error::TooFew {
            what: "usable train episodes",
            needed: 1,
            found: 0,
        });
    }
    let mut opt = AdamW::new(model.n_params(), train.weight_decay);
    let mut curve = Vec::with_capacity(train.total_steps);
    let scale = 1.0 / train.batch_size as f64;
    let mut grad = vec![0.0; model.n_params()];
    for step in 0..train.total_steps {
        let lr = onecycle_lr(step, train)?;
        let noise = rng.random_bool(train.noise_gate_prob);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..train.batch_size {
            let ex = examples.choose(&mut rng).expect("non-empty");
            let (supports, teacher) = student_example(ex, train.dropout_enabled, noise, &mut rng)?;
            let borrowed: Vec<Labeled<'_>> = supports.iter().map(|(f, l)| (f.as_slice(), *l)).collect();
            let l = model.accumulate_grad(&borrowed, &teacher, scale, &mut grad)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!(
                    "mimic loss at step {step} on episode `{}` (lr {lr:e})",
                    ex.episode.id
                )));
            }
            loss += l * scale;
        }
        opt.step(&mut model.data, &grad, lr)?;
        curve.push(CurvePoint { step, lr, loss });
        if step % 500 == 0 {
            log::debug!("step {step} lr {lr:.3e} loss {loss:.5}");
        }
    }
    Ok(MimicRun {
        model,
        curve,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderRun {
    pub params: EncoderParams,
    pub curve: Vec<CurvePoint>,
}

/// Contrastive training of the encoder on raw-input episodes of the train
/// split.
pub fn train_encoder(
    raw: &Dataset,
    hidden: usize,
    out_dim: usize,
    tau: f64,
    train: &TrainConfig,
) -> Result<EncoderRun> {
    train.validate()?;
    let shape = EncoderShape {
        raw_dim: raw.dim,
        hidden,
        out_dim,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut params = EncoderParams::init(shape, &mut rng);
    let episodes: Vec<&Episode> = raw.split(TRAIN_SPLIT).collect();
    if train.total_steps > 0 && episodes.is_empty() {
        return Err(Error::TooFew {
            what: "train episodes",
            needed: 1,
            found: 0,
        });
    }
    let mut opt = AdamW::new(params.data.len(), train.weight_decay);
    let mut curve = Vec::with_capacity(train.total_steps);
    for step in 0..train.total_steps {
        let lr = onecycle_lr(step, train)?;
        let batch: Vec<&Episode> = (0..train.batch_size)
            .map(|_| *episodes.choose(&mut rng).expect("non-empty"))
            .collect();
        let loss = encoder_train_step(&mut params, &batch, tau, &mut opt, lr)?;
        curve.push(CurvePoint { step, lr, loss });
    }
    Ok(EncoderRun { params, curve })
}

fn random_labeled<R: Rng + ?Sized>(per_class: usize, dim: usize, rng: &mut R) -> Vec<(Vec<f64>, Label)> {
    (0..2 * per_class)
        .map(|i| {
            let v = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            (v, if i < per_class { Label::Positive } else { Label::Negative })
        })
        .collect()
}

/// Finite-difference check of a mimic loss through a freshly initialized
/// model on random supports and a random teacher.
pub fn gradcheck_mimic(config: MimicConfig, per_class: usize, probes: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MimicModel::init(config, &mut rng)?;
    // larger weights than the default init so every path carries signal
    for v in &mut model.data {
        *v += rng.random_range(-0.3..0.3);
    }
    let s = random_labeled(per_class, config.token_dim, &mut rng);
    let supports: Vec<Labeled<'_>> = s.iter().map(|(f, l)| (f.as_slice(), *l)).collect();
    let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let teacher = match config.mode {
        crate::mimic::MimicMode::SvmMimic => MimicTargets::Hyperplane(rand_vec(config.token_dim + 1)),
        crate::mimic::MimicMode::PrototypeMimic => MimicTargets::Prototypes(crate::classifiers::PrototypePair {
            p: rand_vec(config.token_dim),
            n: rand_vec(config.token_dim),
        }),
    };
    let (_, grad) = model.loss_and_grad(&supports, &teacher)?;
    let data = model.data.clone();
    gradient_check(
        |p| model.loss_at(p, &supports, &teacher),
        &data,
        &grad,
        probes,
        &mut rng,
    )
}

/// Finite-difference check of the contrastive loss through the encoder.
pub fn gradcheck_encoder(shape: EncoderShape, per_class: usize, tau: f64, probes: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = EncoderParams::init(shape, &mut rng);
    for v in &mut params.data {
        *v += rng.random_range(-0.3..0.3);
    }
    let s = random_labeled(per_class, shape.raw_dim, &mut rng);
    let e = Episode {
        id: "gradcheck".into(),
        split: TRAIN_SPLIT.into(),
        positives: s[..per_class].iter().map(|x| x.0.clone()).collect(),
        negatives: s[per_class..].iter().map(|x| x.0.clone()).collect(),
        queries: vec![],
        concept_id: None,
    };
    let (_, grad) = episode_loss_grad(&params, &e, tau)?;
    let data = params.data.clone();
    gradient_check(
        |p| {
            params.data.copy_from_slice(p);
            episode_loss_grad(&params, &e, tau).map(|(l, _)| l)
        },
        &data,
        &grad,
        probes,
        &mut rng,
    )
}

/// Mean of the first and last `frac` of a curve.
pub fn curve_ends(curve: &[CurvePoint], frac: f64) -> Option<(f64, f64)> {
    let n = ((curve.len() as f64 * frac).ceil() as usize).max(1);
    if curve.len() < n {
        return None;
    }
    let mean = |s: &[CurvePoint]| s.iter().map(|p| p.loss).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..n]), mean(&curve[curve.len() - n..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimic::MimicMode;
    use crate::synthetic::{generate_dataset, EpisodeSpec, PerSplit};

    fn data() -> Dataset {
        let spec = EpisodeSpec {
            dim: 8,
            raw_dim: 12,
            episodes: PerSplit {
                train: 30,
                val: 0,
                test: 10,
            },
            pools: PerSplit {
                train: 10,
                val: 1,
                test: 5,
            },
            ..Default::default()
        };
        generate_dataset(&spec, false).unwrap().dataset
    }

    fn cfg(mode: MimicMode) -> MimicConfig {
        MimicConfig {
            mode,
            depth: 1,
            heads: 2,
            head_dim: 4,
            token_dim: 8,
            mlp_dim: 8,
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let d = data();
        let t = TrainConfig {
            total_steps: 0,
            ..Default::default()
        };
        let run = train_mimic(&d, cfg(MimicMode::SvmMimic), &t, &SvmConfig::default()).unwrap();
        let init = MimicModel::init(cfg(MimicMode::SvmMimic), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(run.model, init);
        assert!(run.curve.is_empty());
    }

    #[test]
    fn deterministic_and_decreasing() {
        let d = data();
        let t = TrainConfig {
            total_steps: 200,
            max_lr: 3e-3,
            ..Default::default()
        };
        for mode in [MimicMode::SvmMimic, MimicMode::PrototypeMimic] {
            let a = train_mimic(&d, cfg(mode), &t, &SvmConfig::default()).unwrap();
            let b = train_mimic(&d, cfg(mode), &t, &SvmConfig::default()).unwrap();
            assert_eq!(a.model.data, b.model.data);
            assert_eq!(a.curve, b.curve);
            let (first, last) = curve_ends(&a.curve, 0.1).unwrap();
            assert!(last < first, "{mode:?}: {first} -> {last}");
        }
    }

    #[test]
    fn teacher_unaffected_by_noise() {
        let d = data();
        let (ex, skipped) = prepare_teachers(&d, MimicMode::SvmMimic, &SvmConfig::default());
        assert!(skipped.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (clean_s, clean_t) = student_example(&ex[0], false, false, &mut rng).unwrap();
        let (noisy_s, noisy_t) = student_example(&ex[0], false, true, &mut rng).unwrap();
        assert_eq!(clean_t, noisy_t);
        let flips = clean_s.iter().zip(&noisy_s).filter(|(a, b)| a.1 != b.1).count();
        assert_eq!(flips, 2);
    }

    #[test]
    fn wrong_dim_rejected() {
        let d = data();
        let mut c = cfg(MimicMode::SvmMimic);
        c.token_dim = 9;
        assert!(train_mimic(&d, c, &TrainConfig::default(), &SvmConfig::default()).is_err());
    }

    #[test]
    fn gradchecks_pass() {
        for mode in [MimicMode::SvmMimic, MimicMode::PrototypeMimic] {
            let r = gradcheck_mimic(cfg(mode), 3, 40, 2).unwrap();
            assert!(r.max_rel_error < 1e-6, "{mode:?} {}", r.max_rel_error);
        }
        let shape = EncoderShape {
            raw_dim: 6,
            hidden: 5,
            out_dim: 4,
        };
        let r = gradcheck_encoder(shape, 3, 0.1, 40, 2).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn encoder_loss_falls() {
        let spec = EpisodeSpec {
            dim: 8,
            raw_dim: 12,
            episodes: PerSplit {
                train: 40,
                val: 0,
                test: 0,
            },
            pools: PerSplit {
                train: 10,
                val: 0,
                test: 0,
            },
            ..Default::default()
        };
        let raw = generate_dataset(&spec, true).unwrap().raw.unwrap();
        let t = TrainConfig {
            total_steps: 150,
            max_lr: 3e-3,
            ..Default::default()
        };
        let run = train_encoder(&raw, 16, 8, crate::encoder::DEFAULT_TAU, &t).unwrap();
        let (first, last) = curve_ends(&run.curve, 0.1).unwrap();
        assert!(last < first, "{first} -> {last}");
    }
}
