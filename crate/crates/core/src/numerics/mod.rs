//! Dense kernels with hand-written backward passes.
//!
//! Every kernel here has a forward function and a matching `*_backward`
//! that maps an upstream gradient to input gradients. Models compose them
//! explicitly; there is no autodiff graph.

mod layers;
mod tensor;

pub use layers::{
    Activation, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache, ParamId, ParamStore,
};
pub use tensor::{gemm, gemm_into, matmul, matmul_nt, Tensor2, Trans};

use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Given `p = softmax_rows(s)` and `dp`, returns `ds`.
pub fn softmax_rows_backward(p: &Tensor2, dp: &Tensor2) -> Tensor2 {
    let mut ds = Tensor2::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        let pr = p.row(r);
        let dr = dp.row(r);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in ds.row_mut(r).iter_mut().zip(pr).zip(dr) {
            *o = pv * (dv - dot);
        }
    }
    ds
}

/// Intermediate values of [`attention`] needed by its backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub weights: Tensor2,
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √D) V` for a single head.
pub fn attention(queries: &Tensor2, keys: &Tensor2, values: &Tensor2) -> Result<Tensor2> {
    attention_cached(queries, keys, values).map(|(o, _)| o)
}

pub fn attention_cached(
    queries: &Tensor2,
    keys: &Tensor2,
    values: &Tensor2,
) -> Result<(Tensor2, AttentionCache)> {
    if queries.cols() != keys.cols() {
        return Err(Error::Shape(format!(
            "attention query dim {} vs key dim {}",
            queries.cols(),
            keys.cols()
        )));
    }
    if keys.rows() != values.rows() {
        return Err(Error::Shape(format!(
            "attention has {} keys but {} values",
            keys.rows(),
            values.rows()
        )));
    }
    if keys.rows() == 0 || queries.rows() == 0 {
        return Err(Error::Shape(
            "attention needs at least one query and key".into(),
        ));
    }
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let mut scores = Tensor2::zeros(queries.rows(), keys.rows());
    gemm_into(scale, queries, Trans::N, keys, Trans::T, 0.0, &mut scores);
    let weights = softmax_rows(&scores);
    let out = gemm(&weights, Trans::N, values, Trans::N);
    Ok((out, AttentionCache { weights }))
}

/// Returns `(dQ, dK, dV)`.
pub fn attention_backward(
    queries: &Tensor2,
    keys: &Tensor2,
    values: &Tensor2,
    cache: &AttentionCache,
    d_out: &Tensor2,
) -> (Tensor2, Tensor2, Tensor2) {
    let scale = 1.0 / (queries.cols() as f64).sqrt();
    let p = &cache.weights;
    let dv = gemm(p, Trans::T, d_out, Trans::N);
    let dp = gemm(d_out, Trans::N, values, Trans::T);
    let ds = softmax_rows_backward(p, &dp);
    let mut dq = Tensor2::zeros(queries.rows(), queries.cols());
    gemm_into(scale, &ds, Trans::N, keys, Trans::N, 0.0, &mut dq);
    let mut dk = Tensor2::zeros(keys.rows(), keys.cols());
    gemm_into(scale, &ds, Trans::T, queries, Trans::N, 0.0, &mut dk);
    (dq, dk, dv)
}

/// Sinusoidal encoding of 3D positions.
///
/// Column `2 * (axis * bands + j)` holds `sin(2^j π p_axis)` and the next
/// column the matching cosine. Columns past `6 * bands` are zero.
pub fn fourier_pe(positions: &[[f64; 3]], bands: usize, out_dim: usize) -> Result<Tensor2> {
    let used = 6 * bands;
    if out_dim < used {
        return Err(Error::InvalidInput(format!(
            "fourier encoding needs at least {used} columns for {bands} bands, got {out_dim}"
        )));
    }
    let freqs: Vec<f64> = (0..bands)
        .map(|j| 2f64.powi(j as i32) * std::f64::consts::PI)
        .collect();
    let mut out = Tensor2::zeros(positions.len(), out_dim);
    for (r, p) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for axis in 0..3 {
            for (j, f) in freqs.iter().enumerate() {
                let (s, c) = (f * p[axis]).sin_cos();
                let col = 2 * (axis * bands + j);
                row[col] = s;
                row[col + 1] = c;
            }
        }
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}
