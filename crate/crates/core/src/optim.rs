//! AdamW, the one-cycle learning-rate schedule and finite-difference
//! gradient checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training hyper-parameters shared by the mimic and encoder loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability that a batch receives label noise.
    pub noise_gate_prob: f64,
    pub dropout_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 5e-5,
            warmup_frac: 0.05,
            total_steps: 5000,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 0,
            noise_gate_prob: 0.25,
            dropout_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(Error::Config(format!(
                "warmup_frac must be in (0, 1), got {}",
                self.warmup_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_gate_prob) {
            return Err(Error::Config("noise_gate_prob must be in [0, 1]".into()));
        }
        if !(self.max_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("max_lr and weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `max_lr` over the first `warmup_frac` of the
/// steps, then cosine decay to 0 at `total_steps`.
pub fn onecycle_lr(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let total = cfg.total_steps as f64;
    let warm = cfg.warmup_frac * total;
    let s = step as f64;
    if s <= warm {
        if warm == 0.0 {
            return Ok(cfg.max_lr);
        }
        return Ok(cfg.max_lr * s / warm);
    }
    let progress = (s - warm) / (total - warm);
    Ok(cfg.max_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// AdamW with bias correction and decoupled weight decay applied to every
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update. A non-finite gradient rejects the whole step and leaves
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at index {i}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p *= decay;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central-difference step used by [`gradient_check`].
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute terms. Central
/// differences at `FD_STEP` carry about 1e-10 of rounding noise for an
/// O(1) loss, so exactly-zero gradients (e.g. attention key biases) would
/// otherwise read as large relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(index, analytic, numeric)` for every probed coordinate.
    pub probes: Vec<(usize, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compare `analytic` against central differences of `loss` on
/// `probe_count` coordinates drawn without replacement.
pub fn gradient_check<F, R>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    probe_count: usize,
    rng: &mut R,
) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
    R: Rng + ?Sized,
{
    if analytic.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {i}")));
    }
    let count = probe_count.min(params.len());
    let idx = rand::seq::index::sample(rng, params.len(), count);
    let mut work = params.to_vec();
    let mut probes = Vec::with_capacity(count);
    let mut worst: f64 = 0.0;
    for i in idx {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let up = loss(&work)?;
        work[i] = orig - FD_STEP;
        let down = loss(&work)?;
        work[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss while probing parameter {i}")));
        }
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
        probes.push((i, analytic[i], numeric));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probes,
    })
}
