//! Soft-margin linear SVM solved in the dual by two-coordinate descent.
//!
//! The dual is
//!
//! ```text
//! min_a  1/2 a'Qa - sum(a)   s.t.  y'a = 0,  0 <= a_i <= C,   Q_ij = y_i y_j <x_i, x_j>
//! ```
//!
//! The equality constraint comes from the unregularized intercept, so each
//! step moves the maximal-violating pair (second-order pair selection) and the
//! solver stops once the gap `m(a) - M(a)` between the two violating sets
//! drops below `tol`. The intercept is recovered from the free support
//! vectors afterwards; it is never folded into `w`.

use serde::{Deserialize, Serialize};

use super::Labeled;
use crate::episode::Label;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm};

const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    /// Hinge-loss weight.
    pub c: f64,
    /// Stop when the maximal dual violation is below this.
    pub tol: f64,
    /// Budget in passes; one pass is one pair update per support.
    pub max_iters: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tol: 1e-6,
            max_iters: 10_000,
        }
    }
}

/// Decision boundary `w.x + b = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Hyperplane {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Hyperplane> {
        if !w.iter().all(|x| x.is_finite()) || !b.is_finite() {
            return Err(Error::NonFinite("hyperplane".into()));
        }
        if norm(&w) == 0.0 {
            return Err(Error::ZeroNorm("hyperplane coefficients"));
        }
        Ok(Hyperplane { w, b })
    }

    /// Split a `D+1` vector `(w, b)`.
    pub fn from_concat(h: &[f64]) -> Result<Hyperplane> {
        match h.split_last() {
            Some((b, w)) if !w.is_empty() => Hyperplane::new(w.to_vec(), *b),
            _ => Err(Error::Shape(format!("hyperplane vector of length {}", h.len()))),
        }
    }

    pub fn to_concat(&self) -> Vec<f64> {
        let mut h = self.w.clone();
        h.push(self.b);
        h
    }

    pub fn decision(&self, f: &[f64]) -> f64 {
        dot(&self.w, f) + self.b
    }
}

/// Signed distance `(w.f + b) / |w|`.
pub fn margin_score(h: &Hyperplane, f: &[f64]) -> Result<f64> {
    if h.w.len() != f.len() {
        return Err(Error::DimensionMismatch {
            expected: h.w.len(),
            found: f.len(),
        });
    }
    let n = norm(&h.w);
    if n == 0.0 {
        return Err(Error::ZeroNorm("hyperplane coefficients"));
    }
    Ok(h.decision(f) / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub hyperplane: Hyperplane,
    /// Dual variables, one per support in input order.
    pub alpha: Vec<f64>,
    pub iterations: usize,
    /// Final maximal violation `m(a) - M(a)`.
    pub violation: f64,
    pub c: f64,
}

pub fn svm_fit(supports: &[Labeled<'_>], cfg: &SvmConfig) -> Result<SvmFit> {
    if !(cfg.c > 0.0) {
        return Err(Error::InvalidArgument(format!("C must be > 0, got {}", cfg.c)));
    }
    let n_pos = supports.iter().filter(|(_, l)| *l == Label::Positive).count();
    if n_pos == 0 || n_pos == supports.len() {
        return Err(Error::TooFew {
            what: "supports in each class",
            needed: 1,
            found: 0,
        });
    }
    let d = supports[0].0.len();
    if let Some((v, _)) = supports.iter().find(|(v, _)| v.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: v.len(),
        });
    }

    let n = supports.len();
    let c = cfg.c;
    let y: Vec<f64> = supports.iter().map(|(_, l)| l.sign()).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = y[i] * y[j] * dot(supports[i].0, supports[j].0);
            q[i * n + j] = v;
            q[j * n + i] = v;
        }
    }
    let qd: Vec<f64> = (0..n).map(|i| q[i * n + i]).collect();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];

    let at_upper = |a: f64| a >= c;
    let at_lower = |a: f64| a <= 0.0;
    let budget = cfg.max_iters.saturating_mul(n.max(1));
    let mut iterations = 0;
    let mut violation;

    loop {
        // i: maximizes -y_t G_t over the "up" set
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = None;
        for t in 0..n {
            let up = if y[t] > 0.0 { !at_upper(alpha[t]) } else { !at_lower(alpha[t]) };
            if up && -y[t] * grad[t] >= gmax {
                gmax = -y[t] * grad[t];
                i_sel = Some(t);
            }
        }
        // j: second-order choice over the "low" set
        let mut gmax2 = f64::NEG_INFINITY;
        let mut j_sel = None;
        let mut obj_min = f64::INFINITY;
        for t in 0..n {
            let low = if y[t] > 0.0 { !at_lower(alpha[t]) } else { !at_upper(alpha[t]) };
            if !low {
                continue;
            }
            let yg = y[t] * grad[t];
            gmax2 = gmax2.max(yg);
            if let Some(i) = i_sel {
                let grad_diff = gmax + yg;
                if grad_diff > 0.0 {
                    let mut quad = qd[i] + qd[t] - 2.0 * y[i] * y[t] * q[i * n + t];
                    if quad <= 0.0 {
                        quad = TAU;
                    }
                    let obj = -(grad_diff * grad_diff) / quad;
                    if obj <= obj_min {
                        obj_min = obj;
                        j_sel = Some(t);
                    }
                }
            }
        }
        violation = gmax + gmax2;
        let (i, j) = match (i_sel, j_sel) {
            (Some(i), Some(j)) if violation >= cfg.tol => (i, j),
            _ => break,
        };
        if iterations >= budget {
            return Err(Error::SvmNotConverged {
                iterations,
                violation,
            });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let qij = q[i * n + j];
        if y[i] != y[j] {
            let mut quad = qd[i] + qd[j] + 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let mut quad = qd[i] + qd[j] - 2.0 * qij;
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q[i * n + t] * di + q[j * n + t] * dj;
        }
    }

    // intercept: average over free vectors, else midpoint of the feasible range
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if at_upper(alpha[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if at_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 {
        sum_free / free as f64
    } else {
        (ub + lb) / 2.0
    };

    let mut w = vec![0.0; d];
    for (t, (x, _)) in supports.iter().enumerate() {
        let coef = alpha[t] * y[t];
        if coef != 0.0 {
            for (wk, xk) in w.iter_mut().zip(x.iter()) {
                *wk += coef * xk;
            }
        }
    }
    let hyperplane = Hyperplane::new(w, -rho)?;
    Ok(SvmFit {
        hyperplane,
        alpha,
        iterations,
        violation,
        c,
    })
}

/// `1/2 |w|^2 + C * sum(hinge)`.
pub fn primal_objective(h: &Hyperplane, supports: &[Labeled<'_>], c: f64) -> f64 {
    let hinge: f64 = supports
        .iter()
        .map(|(x, l)| (1.0 - l.sign() * h.decision(x)).max(0.0))
        .sum();
    0.5 * dot(&h.w, &h.w) + c * hinge
}

/// Per-support KKT residuals of a fit, followed by `|sum(alpha_i y_i)|`.
///
/// With `g_i = y_i (w.x_i + b)`: `alpha = 0` needs `g >= 1`, a free
/// `alpha` needs `g = 1`, `alpha = C` needs `g <= 1`.
pub fn kkt_residuals(fit: &SvmFit, supports: &[Labeled<'_>]) -> Vec<f64> {
    let mut out: Vec<f64> = supports
        .iter()
        .zip(&fit.alpha)
        .map(|((x, l), &a)| {
            let g = l.sign() * fit.hyperplane.decision(x);
            if a <= 0.0 {
                (1.0 - g).max(0.0)
            } else if a >= fit.c {
                (g - 1.0).max(0.0)
            } else {
                (g - 1.0).abs()
            }
        })
        .collect();
    let balance: f64 = supports
        .iter()
        .zip(&fit.alpha)
        .map(|((_, l), a)| l.sign() * a)
        .sum();
    out.push(balance.abs());
    out
}
