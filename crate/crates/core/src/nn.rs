//! Flat-buffer neural-net kernels with hand-written backward passes.
//!
//! Everything operates on caller-owned row-major slices so the training
//! loop controls allocation. Kernels are generic over [`Scalar`] so that
//! the same code runs in f32 for training and f64 for gradient checking.

use crate::error::{Error, Result};

/// Element type for model math. f32 is the master-weight type; f64 exists
/// for finite-difference verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f32(v: f32) -> Self;
    fn from_f64(v: f64) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { data: vec![T::zero(); numel], shape: shape.to_vec() }
    }

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot take shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { data, shape: shape.to_vec() })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            shape: self.shape.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x W^T + b with x: (n, d_in), w: (d_out, d_in), b: (d_out).
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    out: &mut [T],
    n: usize,
    d_in: usize,
    d_out: usize,
) {
    debug_assert_eq!(x.len(), n * d_in);
    debug_assert_eq!(w.len(), d_out * d_in);
    debug_assert_eq!(b.len(), d_out);
    debug_assert_eq!(out.len(), n * d_out);
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let oi = &mut out[i * d_out..(i + 1) * d_out];
        for o in 0..d_out {
            let wo = &w[o * d_in..(o + 1) * d_in];
            let mut acc = b[o];
            for k in 0..d_in {
                acc += xi[k] * wo[k];
            }
            oi[o] = acc;
        }
    }
}

/// Accumulates into dx, dw, db (callers zero them per step, not per call).
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    d_out: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
    n: usize,
    d_in: usize,
    d_out_dim: usize,
) {
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let gi = &d_out[i * d_out_dim..(i + 1) * d_out_dim];
        let dxi = &mut dx[i * d_in..(i + 1) * d_in];
        for o in 0..d_out_dim {
            let g = gi[o];
            if g == T::zero() {
                continue;
            }
            let wo = &w[o * d_in..(o + 1) * d_in];
            let dwo = &mut dw[o * d_in..(o + 1) * d_in];
            db[o] += g;
            for k in 0..d_in {
                dxi[k] += g * wo[k];
                dwo[k] += g * xi[k];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

pub const LN_EPS: f64 = 1e-6;

/// Per-row layer norm: y = (x - mean) * rstd * g + b. Caches mean and rstd
/// (1/sqrt(var + eps)) per row for the backward pass.
pub fn layernorm_forward<T: Scalar>(
    x: &[T],
    g: &[T],
    b: &[T],
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    n: usize,
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(LN_EPS);
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let mut mu = T::zero();
        for &v in xi {
            mu += v;
        }
        mu *= inv_d;
        let mut var = T::zero();
        for &v in xi {
            let c = v - mu;
            var += c * c;
        }
        var *= inv_d;
        let rs = (var + eps).sqrt().recip();
        mean[i] = mu;
        rstd[i] = rs;
        let oi = &mut out[i * d..(i + 1) * d];
        for k in 0..d {
            oi[k] = (xi[k] - mu) * rs * g[k] + b[k];
        }
    }
}

pub fn layernorm_backward<T: Scalar>(
    x: &[T],
    g: &[T],
    mean: &[T],
    rstd: &[T],
    d_out: &[T],
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
    n: usize,
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for i in 0..n {
        let xi = &x[i * d..(i + 1) * d];
        let gi = &d_out[i * d..(i + 1) * d];
        let (mu, rs) = (mean[i], rstd[i]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for k in 0..d {
            let xhat = (xi[k] - mu) * rs;
            let dxhat = gi[k] * g[k];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dg[k] += gi[k] * xhat;
            db[k] += gi[k];
        }
        let m1 = sum_dxhat * inv_d;
        let m2 = sum_dxhat_xhat * inv_d;
        let dxi = &mut dx[i * d..(i + 1) * d];
        for k in 0..d {
            let xhat = (xi[k] - mu) * rs;
            dxi[k] += rs * (gi[k] * g[k] - m1 - xhat * m2);
        }
    }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu_forward<T: Scalar>(x: &[T], out: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        let u = c * (v + a * v * v * v);
        *o = half * v * (T::one() + u.tanh());
    }
}

pub fn gelu_backward<T: Scalar>(x: &[T], d_out: &[T], dx: &mut [T]) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    for i in 0..x.len() {
        let v = x[i];
        let u = c * (v + a * v * v * v);
        let t = u.tanh();
        let sech2 = T::one() - t * t;
        let du = c * (T::one() + three * a * v * v);
        let grad = half * (T::one() + t) + half * v * sech2 * du;
        dx[i] += d_out[i] * grad;
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<T: Scalar>(x: &mut [T], n: usize, m: usize) {
    for i in 0..n {
        let row = &mut x[i * m..(i + 1) * m];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = sum.recip();
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// dx for y = softmax(x) given y and dy, accumulated per row.
pub fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::zero();
    for k in 0..y.len() {
        dot += y[k] * dy[k];
    }
    for k in 0..y.len() {
        dx[k] += y[k] * (dy[k] - dot);
    }
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

/// Forward attention over a packed qkv buffer.
///
/// `qkv` is (n, 3*dim) with each row laid out `[q | k | v]`; head h owns the
/// contiguous `head_dim` slice at offset `h * head_dim` within each of q/k/v.
/// Writes softmax weights to `att` (heads, n, n) and the concatenated head
/// outputs to `out` (n, dim).
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    att: &mut [T],
    out: &mut [T],
    n: usize,
    dim: usize,
    heads: usize,
) {
    debug_assert_eq!(dim % heads, 0);
    let hd = dim / heads;
    let row = 3 * dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    for h in 0..heads {
        let qo = h * hd;
        let ko = dim + h * hd;
        let vo = 2 * dim + h * hd;
        let att_h = &mut att[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let qi = &qkv[i * row + qo..i * row + qo + hd];
            let scores = &mut att_h[i * n..(i + 1) * n];
            for j in 0..n {
                let kj = &qkv[j * row + ko..j * row + ko + hd];
                let mut acc = T::zero();
                for k in 0..hd {
                    acc += qi[k] * kj[k];
                }
                scores[j] = acc * scale;
            }
        }
        softmax_rows(att_h, n, n);
        for i in 0..n {
            let weights = &att_h[i * n..(i + 1) * n];
            let oi = &mut out[i * dim + h * hd..i * dim + (h + 1) * hd];
            oi.iter_mut().for_each(|v| *v = T::zero());
            for j in 0..n {
                let w = weights[j];
                if w == T::zero() {
                    continue;
                }
                let vj = &qkv[j * row + vo..j * row + vo + hd];
                for k in 0..hd {
                    oi[k] += w * vj[k];
                }
            }
        }
    }
}

/// Backward attention; accumulates into `d_qkv` (n, 3*dim).
pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    att: &[T],
    d_out: &[T],
    d_qkv: &mut [T],
    n: usize,
    dim: usize,
    heads: usize,
) {
    let hd = dim / heads;
    let row = 3 * dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let mut datt_row = vec![T::zero(); n];
    let mut dscores_row = vec![T::zero(); n];
    for h in 0..heads {
        let qo = h * hd;
        let ko = dim + h * hd;
        let vo = 2 * dim + h * hd;
        let att_h = &att[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let doi = &d_out[i * dim + h * hd..i * dim + (h + 1) * hd];
            let weights = &att_h[i * n..(i + 1) * n];
            // dv and datt from out = att * v
            for j in 0..n {
                let vj = &qkv[j * row + vo..j * row + vo + hd];
                let mut acc = T::zero();
                for k in 0..hd {
                    acc += doi[k] * vj[k];
                }
                datt_row[j] = acc;
                let w = weights[j];
                let dvj = &mut d_qkv[j * row + vo..j * row + vo + hd];
                for k in 0..hd {
                    dvj[k] += w * doi[k];
                }
            }
            dscores_row.iter_mut().for_each(|v| *v = T::zero());
            softmax_backward_row(weights, &datt_row, &mut dscores_row);
            // scores[i][j] = scale * q_i . k_j
            let qi: Vec<T> = qkv[i * row + qo..i * row + qo + hd].to_vec();
            for j in 0..n {
                let ds = dscores_row[j] * scale;
                if ds == T::zero() {
                    continue;
                }
                let kj = &qkv[j * row + ko..j * row + ko + hd];
                let dqi = &mut d_qkv[i * row + qo..i * row + qo + hd];
                for k in 0..hd {
                    dqi[k] += ds * kj[k];
                }
                let dkj = &mut d_qkv[j * row + ko..j * row + ko + hd];
                for k in 0..hd {
                    dkj[k] += ds * qi[k];
                }
            }
        }
    }
}

/// out += a, elementwise.
pub fn add_inplace<T: Scalar>(out: &mut [T], a: &[T]) {
    debug_assert_eq!(out.len(), a.len());
    for (o, &v) in out.iter_mut().zip(a.iter()) {
        *o += v;
    }
}
