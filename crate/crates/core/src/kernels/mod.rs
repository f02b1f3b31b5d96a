//! Dense numeric primitives: GELU, layer norm, softmax, positional
//! embedding, and the grouped attention block with its backward pass.

mod block;
mod params;

pub use block::{
    ffn_forward, fwa_block_backward, fwa_block_forward, fwa_block_infer, group_attention_forward,
    group_attention_infer, group_attention_padded, AttnCache, BlockCache, BlockGrads, FfnCache,
};
pub use params::{read_params, write_params, AttnParams, PARAMS_MAGIC};

use std::f64::consts::{PI, SQRT_2};

use crate::error::{FwaError, Result};
use crate::tensor::{Mat, Real};

pub const LN_EPS: f64 = 1e-5;

/// Lowest and highest positional-embedding frequency, cycles per meter.
pub const PE_MIN_FREQ: f64 = 1.0 / 10_000.0;
pub const PE_MAX_FREQ: f64 = 1.0;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

#[inline]
pub(crate) fn gelu_t<T: Real>(x: T) -> T {
    T::of(gelu(x.as_f64()))
}

/// Numerically stable in-place softmax (max-subtracted).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Normalizes one row in place to `x̂`, returning `1/sqrt(var + eps)`.
/// Mean and variance use Welford's single-pass update.
pub(crate) fn normalize_row<T: Real>(row: &[T], xhat: &mut [T]) -> T {
    let mut mean = T::zero();
    let mut m2 = T::zero();
    for (i, &v) in row.iter().enumerate() {
        let n = T::from_usize(i + 1).unwrap();
        let delta = v - mean;
        mean = mean + delta / n;
        m2 = m2 + delta * (v - mean);
    }
    let var = m2 / T::from_usize(row.len()).unwrap();
    let rstd = T::one() / (var + T::of(LN_EPS)).sqrt();
    for (o, &v) in xhat.iter_mut().zip(row) {
        *o = (v - mean) * rstd;
    }
    rstd
}

pub fn layer_norm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> Result<Mat<T>> {
    if gamma.len() != x.cols || beta.len() != x.cols {
        return Err(FwaError::Shape(format!(
            "layer norm over {} columns given gamma/beta of length {}/{}",
            x.cols,
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let orow = out.row_mut(r);
        normalize_row(x.row(r), orow);
        for ((o, g), b) in orow.iter_mut().zip(gamma).zip(beta) {
            *o = *o * *g + *b;
        }
    }
    Ok(out)
}

/// Sinusoidal absolute embedding of BEV positions: `D/4` geometrically
/// spaced frequencies per axis, each contributing a `(sin, cos)` pair;
/// the x block fills the first `D/2` columns and the y block the rest.
pub fn positional_embedding<T: Real>(coords: &[[f64; 2]], d_model: usize) -> Result<Mat<T>> {
    if d_model == 0 || !d_model.is_multiple_of(4) {
        return Err(FwaError::Config(format!(
            "positional embedding width must be a positive multiple of 4, got {d_model}"
        )));
    }
    let freqs = pe_frequencies(d_model / 4);
    let half = d_model / 2;
    let mut out = Mat::zeros(coords.len(), d_model);
    for (r, c) in coords.iter().enumerate() {
        let row = out.row_mut(r);
        for axis in 0..2 {
            for (k, f) in freqs.iter().enumerate() {
                let phase = 2.0 * PI * f * c[axis];
                row[axis * half + 2 * k] = T::of(phase.sin());
                row[axis * half + 2 * k + 1] = T::of(phase.cos());
            }
        }
    }
    Ok(out)
}

pub fn pe_frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![PE_MIN_FREQ];
    }
    let ratio = PE_MAX_FREQ / PE_MIN_FREQ;
    (0..n)
        .map(|k| PE_MIN_FREQ * ratio.powf(k as f64 / (n - 1) as f64))
        .collect()
}
