//! A two-layer MLP encoder trained with a temperature-scaled contrastive
//! loss over one episode's supports.
//!
//! For positives `f_i, f_j` (`i != j`) and negatives `n_k`:
//!
//! ```text
//! l_ij = -log( e^{s_ij} / (e^{s_ij} + sum_k e^{s_ik}) ),   s = cos(., .) / tau
//! ```
//!
//! The loss of an episode is the mean of `l_ij` over all ordered pairs.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::linalg::{cosine_grad_a, dot, norm};
use crate::optim::AdamW;
use crate::params::{fill, Init, ParamLayout};

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub raw_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

/// `f = W2 relu(W1 x + b1) + b2`, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub shape: EncoderShape,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
}

struct Trace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(shape: EncoderShape) -> EncoderParams {
        let mut layout = ParamLayout::default();
        let w1 = layout.push("w1", &[shape.hidden, shape.raw_dim]);
        let b1 = layout.push("b1", &[shape.hidden]);
        let w2 = layout.push("w2", &[shape.out_dim, shape.hidden]);
        let b2 = layout.push("b2", &[shape.out_dim]);
        let data = vec![0.0; layout.len()];
        EncoderParams {
            shape,
            layout,
            data,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn init<R: Rng + ?Sized>(shape: EncoderShape, rng: &mut R) -> EncoderParams {
        let mut p = EncoderParams::zeros(shape);
        let (w1, w2) = (p.w1.clone(), p.w2.clone());
        fill(&mut p.data[w1], Init::FanIn(shape.raw_dim), rng);
        fill(&mut p.data[w2], Init::FanIn(shape.hidden), rng);
        p
    }

    /// Rebuild from a layout and payload, e.g. after loading a checkpoint.
    pub fn from_parts(shape: EncoderShape, layout: &ParamLayout, data: Vec<f64>) -> Result<Self> {
        let mut p = EncoderParams::zeros(shape);
        if &p.layout != layout || data.len() != p.data.len() {
            return Err(Error::Shape("encoder layout does not match its shape".into()));
        }
        p.data = data;
        Ok(p)
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.w1.clone()]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.w2.clone()]
    }

    fn trace(&self, raw: &[f64]) -> Result<(Vec<f64>, Trace)> {
        let s = self.shape;
        if raw.len() != s.raw_dim {
            return Err(Error::DimensionMismatch {
                expected: s.raw_dim,
                found: raw.len(),
            });
        }
        let w1 = &self.data[self.w1.clone()];
        let b1 = &self.data[self.b1.clone()];
        let w2 = &self.data[self.w2.clone()];
        let b2 = &self.data[self.b2.clone()];
        let pre: Vec<f64> = (0..s.hidden)
            .map(|h| dot(&w1[h * s.raw_dim..(h + 1) * s.raw_dim], raw) + b1[h])
            .collect();
        let hidden: Vec<f64> = pre.iter().map(|&x| x.max(0.0)).collect();
        let out = (0..s.out_dim)
            .map(|o| dot(&w2[o * s.hidden..(o + 1) * s.hidden], &hidden) + b2[o])
            .collect();
        Ok((out, Trace { pre, hidden }))
    }

    /// Accumulate parameter gradients for one input given `d_out`.
    fn backward(&self, raw: &[f64], trace: &Trace, d_out: &[f64], grad: &mut [f64]) {
        let s = self.shape;
        let w2 = &self.data[self.w2.clone()];
        let mut d_hidden = vec![0.0; s.hidden];
        for (o, &g) in d_out.iter().enumerate() {
            grad[self.b2.start + o] += g;
            let row = self.w2.start + o * s.hidden;
            for h in 0..s.hidden {
                grad[row + h] += g * trace.hidden[h];
                d_hidden[h] += g * w2[o * s.hidden + h];
            }
        }
        for h in 0..s.hidden {
            if trace.pre[h] <= 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grad[self.b1.start + h] += g;
            let row = self.w1.start + h * s.raw_dim;
            for (r, x) in raw.iter().enumerate() {
                grad[row + r] += g * x;
            }
        }
    }
}

pub fn encoder_forward(params: &EncoderParams, raw: &[f64]) -> Result<Vec<f64>> {
    params.trace(raw).map(|(out, _)| out)
}

/// Mean contrastive loss and its gradients with respect to every positive
/// and every negative feature vector.
pub fn contrastive_loss_grad(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if positives.len() < 2 {
        return Err(Error::TooFew {
            what: "positives for the contrastive loss",
            needed: 2,
            found: positives.len(),
        });
    }
    if negatives.is_empty() {
        return Err(Error::TooFew {
            what: "negatives for the contrastive loss",
            needed: 1,
            found: 0,
        });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let d = positives[0].len();
    for v in positives.iter().chain(negatives) {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
        if norm(v) == 0.0 {
            return Err(Error::ZeroNorm("contrastive feature"));
        }
    }
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
    let np = positives.len();
    let pairs = (np * (np - 1)) as f64;
    let mut gp = vec![vec![0.0; d]; np];
    let mut gn = vec![vec![0.0; d]; negatives.len()];
    let mut total = 0.0;

    // d cos(a, b)/da scaled by `coef`, accumulated into `out`
    let acc = |out: &mut Vec<f64>, a: &[f64], b: &[f64], coef: f64| {
        for (o, g) in out.iter_mut().zip(cosine_grad_a(a, b)) {
            *o += coef * g;
        }
    };

    for i in 0..np {
        let neg_logits: Vec<f64> = negatives
            .iter()
            .map(|n| cos(&positives[i], n) / tau)
            .collect();
        for j in 0..np {
            if i == j {
                continue;
            }
            let s_ij = cos(&positives[i], &positives[j]) / tau;
            // l_ij = softplus(r), r = logsumexp_k(s_ik - s_ij)
            let rel: Vec<f64> = neg_logits.iter().map(|s| s - s_ij).collect();
            let max = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let r = max + rel.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let l_ij = if r > 0.0 { r + (-r).exp().ln_1p() } else { r.exp().ln_1p() };
            total += l_ij;

            // dl/ds_ij = pi_j - 1, dl/ds_ik = pi_k
            let coef_pos = ((-l_ij).exp() - 1.0) / (tau * pairs);
            let (fi, fj) = (&positives[i], &positives[j]);
            acc(&mut gp[i], fi, fj, coef_pos);
            acc(&mut gp[j], fj, fi, coef_pos);
            for (k, x) in rel.iter().enumerate() {
                let coef = (x - l_ij).exp() / (tau * pairs);
                acc(&mut gp[i], fi, &negatives[k], coef);
                acc(&mut gn[k], &negatives[k], fi, coef);
            }
        }
    }
    Ok((total / pairs, gp, gn))
}

pub fn contrastive_loss(positives: &[Vec<f64>], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    contrastive_loss_grad(positives, negatives, tau).map(|(l, _, _)| l)
}

/// Loss of an episode of raw inputs and the gradient with respect to the
/// flat encoder parameters.
pub fn episode_loss_grad(params: &EncoderParams, raw: &Episode, tau: f64) -> Result<(f64, Vec<f64>)> {
    let pos = raw
        .positives
        .iter()
        .map(|x| params.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let neg = raw
        .negatives
        .iter()
        .map(|x| params.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let pf: Vec<Vec<f64>> = pos.iter().map(|(f, _)| f.clone()).collect();
    let nf: Vec<Vec<f64>> = neg.iter().map(|(f, _)| f.clone()).collect();
    let (loss, gp, gn) = contrastive_loss_grad(&pf, &nf, tau)?;
    let mut grad = vec![0.0; params.data.len()];
    for ((x, (_, t)), g) in raw.positives.iter().zip(&pos).zip(&gp) {
        params.backward(x, t, g, &mut grad);
    }
    for ((x, (_, t)), g) in raw.negatives.iter().zip(&neg).zip(&gn) {
        params.backward(x, t, g, &mut grad);
    }
    Ok((loss, grad))
}

/// One AdamW step on the mean loss of `batch`. Returns the pre-step loss.
pub fn encoder_train_step(
    params: &mut EncoderParams,
    batch: &[&Episode],
    tau: f64,
    opt: &mut AdamW,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty encoder batch".into()));
    }
    let mut grad = vec![0.0; params.data.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for e in batch {
        let (l, g) = episode_loss_grad(params, e, tau)?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("encoder loss on episode `{}`", e.id)));
        }
        loss += l * scale;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b * scale);
    }
    opt.step(&mut params.data, &grad, lr)?;
    Ok(loss)
}

/// Mean within-class and cross-class cosine similarity of encoded supports.
pub fn separation(params: &EncoderParams, raw: &[&Episode]) -> Result<(f64, f64)> {
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for e in raw {
        let enc = |vs: &[Vec<f64>]| {
            vs.iter()
                .map(|x| encoder_forward(params, x))
                .collect::<Result<Vec<_>>>()
        };
        let p = enc(&e.positives)?;
        let n = enc(&e.negatives)?;
        let cos = |a: &[f64], b: &[f64]| {
            let d = norm(a) * norm(b);
            if d == 0.0 { 0.0 } else { dot(a, b) / d }
        };
        for class in [&p, &n] {
            for i in 0..class.len() {
                for j in (i + 1)..class.len() {
                    within += cos(&class[i], &class[j]);
                    nw += 1;
                }
            }
        }
        for a in &p {
            for b in &n {
                cross += cos(a, b);
                nc += 1;
            }
        }
    }
    Ok((within / nw.max(1) as f64, cross / nc.max(1) as f64))
}
