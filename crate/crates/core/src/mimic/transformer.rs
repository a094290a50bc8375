//! Pre-norm transformer encoder over an unordered token set, with a
//! hand-written backward pass.
//!
//! Per block: `x += W_o attn(LN1(x))`, then `x += W_2 gelu(W_1 LN2(x))`.
//! Linear weights are stored `in x out` and applied as `x W + b`.
//! There are no positional encodings.

use std::ops::Range;

use crate::linalg::{matmul, matmul_at_acc, matmul_bt_acc};
use crate::params::ParamLayout;

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub d: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub mlp: usize,
}

impl Dims {
    pub fn attn(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn push(layout: &mut ParamLayout, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: layout.push(format!("{name}.w"), &[fan_in, fan_out]),
            b: layout.push(format!("{name}.b"), &[fan_out]),
            fan_in,
            fan_out,
        }
    }

    /// `x[rows x in] -> rows x out`.
    pub fn forward(&self, data: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.fan_out];
        matmul(x, &data[self.w.clone()], rows, self.fan_in, self.fan_out, &mut out);
        let b = &data[self.b.clone()];
        for row in out.chunks_mut(self.fan_out) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        out
    }

    /// Accumulates weight/bias gradients and returns `d_x`.
    pub fn backward(&self, data: &[f64], x: &[f64], d_out: &[f64], rows: usize, grad: &mut [f64]) -> Vec<f64> {
        matmul_at_acc(x, d_out, rows, self.fan_in, self.fan_out, &mut grad[self.w.clone()]);
        let gb = &mut grad[self.b.clone()];
        for row in d_out.chunks(self.fan_out) {
            gb.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
        let mut dx = vec![0.0; rows * self.fan_in];
        matmul_bt_acc(d_out, &data[self.w.clone()], rows, self.fan_out, self.fan_in, &mut dx);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Range<usize>,
    pub beta: Range<usize>,
    pub dim: usize,
}

pub struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn push(layout: &mut ParamLayout, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: layout.push(format!("{name}.gamma"), &[dim]),
            beta: layout.push(format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, data: &[f64], x: &[f64]) -> (Vec<f64>, LnCache) {
        let d = self.dim;
        let g = &data[self.gamma.clone()];
        let b = &data[self.beta.clone()];
        let rows = x.len() / d;
        let mut out = vec![0.0; x.len()];
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        (out, LnCache { xhat, rstd })
    }

    pub fn backward(&self, data: &[f64], cache: &LnCache, d_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let d = self.dim;
        let g = &data[self.gamma.clone()];
        let rows = d_out.len() / d;
        let mut dx = vec![0.0; d_out.len()];
        for r in 0..rows {
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let dy = &d_out[r * d..(r + 1) * d];
            let mut mean_dxh = 0.0;
            let mut mean_dxh_xh = 0.0;
            for j in 0..d {
                grad[self.gamma.start + j] += dy[j] * xh[j];
                grad[self.beta.start + j] += dy[j];
                let dxh = dy[j] * g[j];
                mean_dxh += dxh;
                mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= d as f64;
            mean_dxh_xh /= d as f64;
            for j in 0..d {
                let dxh = dy[j] * g[j];
                dx[r * d + j] = cache.rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct BlockCache {
    ln1: LnCache,
    y1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads x T x T attention weights
    probs: Vec<f64>,
    z: Vec<f64>,
    ln2: LnCache,
    y2: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

fn head_cols(m: &[f64], t: usize, a: usize, h: usize, hd: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * hd);
    for r in 0..t {
        out.extend_from_slice(&m[r * a + h * hd..r * a + (h + 1) * hd]);
    }
    out
}

fn add_head_cols(dst: &mut [f64], src: &[f64], t: usize, a: usize, h: usize, hd: usize) {
    for r in 0..t {
        for c in 0..hd {
            dst[r * a + h * hd + c] += src[r * hd + c];
        }
    }
}

impl Block {
    pub fn push(layout: &mut ParamLayout, name: &str, dims: Dims) -> Block {
        let a = dims.attn();
        Block {
            ln1: LayerNorm::push(layout, &format!("{name}.ln1"), dims.d),
            q: Linear::push(layout, &format!("{name}.attn.q"), dims.d, a),
            k: Linear::push(layout, &format!("{name}.attn.k"), dims.d, a),
            v: Linear::push(layout, &format!("{name}.attn.v"), dims.d, a),
            o: Linear::push(layout, &format!("{name}.attn.o"), a, dims.d),
            ln2: LayerNorm::push(layout, &format!("{name}.ln2"), dims.d),
            fc1: Linear::push(layout, &format!("{name}.mlp.fc1"), dims.d, dims.mlp),
            fc2: Linear::push(layout, &format!("{name}.mlp.fc2"), dims.mlp, dims.d),
        }
    }

    /// In-place forward on `x[t x d]`.
    pub fn forward(&self, data: &[f64], dims: Dims, x: &mut [f64], t: usize) -> BlockCache {
        let (a, hd) = (dims.attn(), dims.head_dim);
        let (y1, ln1) = self.ln1.forward(data, x);
        let q = self.q.forward(data, &y1, t);
        let k = self.k.forward(data, &y1, t);
        let v = self.v.forward(data, &y1, t);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![0.0; dims.heads * t * t];
        let mut z = vec![0.0; t * a];
        for h in 0..dims.heads {
            let (qh, kh, vh) = (head_cols(&q, t, a, h, hd), head_cols(&k, t, a, h, hd), head_cols(&v, t, a, h, hd));
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            matmul_bt_acc(&qh, &kh, t, hd, t, p);
            for row in p.chunks_mut(t) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s * scale));
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = (*s * scale - max).exp();
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            let mut zh = vec![0.0; t * hd];
            matmul(p, &vh, t, t, hd, &mut zh);
            add_head_cols(&mut z, &zh, t, a, h, hd);
        }
        let attn_out = self.o.forward(data, &z, t);
        x.iter_mut().zip(&attn_out).for_each(|(xi, o)| *xi += o);

        let (y2, ln2) = self.ln2.forward(data, x);
        let hpre = self.fc1.forward(data, &y2, t);
        let hact: Vec<f64> = hpre.iter().map(|&v| gelu(v)).collect();
        let mlp_out = self.fc2.forward(data, &hact, t);
        x.iter_mut().zip(&mlp_out).for_each(|(xi, o)| *xi += o);

        BlockCache {
            ln1,
            y1,
            q,
            k,
            v,
            probs,
            z,
            ln2,
            y2,
            hpre,
            hact,
        }
    }

    /// Turns `dx` (gradient w.r.t. the block output) into the gradient
    /// w.r.t. the block input, accumulating parameter gradients.
    pub fn backward(&self, data: &[f64], dims: Dims, c: &BlockCache, dx: &mut [f64], t: usize, grad: &mut [f64]) {
        let (a, hd) = (dims.attn(), dims.head_dim);
        // MLP branch
        let d_hact = self.fc2.backward(data, &c.hact, dx, t, grad);
        let d_hpre: Vec<f64> = d_hact.iter().zip(&c.hpre).map(|(g, &x)| g * gelu_grad(x)).collect();
        let d_y2 = self.fc1.backward(data, &c.y2, &d_hpre, t, grad);
        let d_x1 = self.ln2.backward(data, &c.ln2, &d_y2, grad);
        dx.iter_mut().zip(&d_x1).for_each(|(g, d)| *g += d);

        // attention branch
        let d_z = self.o.backward(data, &c.z, dx, t, grad);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_q = vec![0.0; t * a];
        let mut d_k = vec![0.0; t * a];
        let mut d_v = vec![0.0; t * a];
        for h in 0..dims.heads {
            let p = &c.probs[h * t * t..(h + 1) * t * t];
            let (qh, kh, vh) = (head_cols(&c.q, t, a, h, hd), head_cols(&c.k, t, a, h, hd), head_cols(&c.v, t, a, h, hd));
            let dzh = head_cols(&d_z, t, a, h, hd);
            let mut dp = vec![0.0; t * t];
            matmul_bt_acc(&dzh, &vh, t, hd, t, &mut dp);
            let mut dvh = vec![0.0; t * hd];
            matmul_at_acc(p, &dzh, t, t, hd, &mut dvh);
            // softmax backward, folded with the 1/sqrt(hd) scale
            let mut ds = vec![0.0; t * t];
            for r in 0..t {
                let pr = &p[r * t..(r + 1) * t];
                let dpr = &dp[r * t..(r + 1) * t];
                let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                for j in 0..t {
                    ds[r * t + j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }
            let mut dqh = vec![0.0; t * hd];
            matmul(&ds, &kh, t, t, hd, &mut dqh);
            let mut dkh = vec![0.0; t * hd];
            matmul_at_acc(&ds, &qh, t, t, hd, &mut dkh);
            add_head_cols(&mut d_q, &dqh, t, a, h, hd);
            add_head_cols(&mut d_k, &dkh, t, a, h, hd);
            add_head_cols(&mut d_v, &dvh, t, a, h, hd);
        }
        let mut d_y1 = self.q.backward(data, &c.y1, &d_q, t, grad);
        for (lin, d) in [(&self.k, &d_k), (&self.v, &d_v)] {
            let part = lin.backward(data, &c.y1, d, t, grad);
            d_y1.iter_mut().zip(&part).for_each(|(g, p)| *g += p);
        }
        let d_x0 = self.ln1.backward(data, &c.ln1, &d_y1, grad);
        dx.iter_mut().zip(&d_x0).for_each(|(g, d)| *g += d);
    }
}
