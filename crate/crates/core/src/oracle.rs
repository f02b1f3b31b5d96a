//! Brute-force reference implementations used by the test suites.
//!
//! Nothing here calls into `flatten`, `kernels` or `workload`; each routine
//! recomputes its quantity from the definition, always in `f64`, and favors
//! obvious code over speed.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use crate::flatten::{Axis, WindowSpec};
use crate::kernels::AttnParams;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleConfig {
    pub fd_step: f64,
    pub attention_rtol: f64,
    pub grad_rtol: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-3,
            attention_rtol: 1e-5,
            grad_rtol: 1e-4,
        }
    }
}

// ---------------------------------------------------------------------------
// Sorting and window counting

fn window_and_local(v: f64, w: f64) -> (i64, f64) {
    let q = (v / w).floor();
    (q as i64, v - q * w)
}

fn shifted(c: [f64; 2], spec: &WindowSpec) -> (f64, f64) {
    if spec.shift {
        (c[0] + spec.w_x / 2.0, c[1] + spec.w_y / 2.0)
    } else {
        (c[0], c[1])
    }
}

/// Window-sorted permutation from an explicit five-field comparator.
pub fn oracle_sort(coords: &[[f64; 2]], spec: &WindowSpec) -> Vec<usize> {
    struct Key {
        wa: i64,
        wb: i64,
        la: f64,
        lb: f64,
        idx: usize,
    }
    let mut keys: Vec<Key> = coords
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let (x, y) = shifted(c, spec);
            let (wx, lx) = window_and_local(x, spec.w_x);
            let (wy, ly) = window_and_local(y, spec.w_y);
            match spec.major_axis {
                Axis::X => Key {
                    wa: wx,
                    wb: wy,
                    la: lx,
                    lb: ly,
                    idx,
                },
                Axis::Y => Key {
                    wa: wy,
                    wb: wx,
                    la: ly,
                    lb: lx,
                    idx,
                },
            }
        })
        .collect();
    keys.sort_by(|a, b| {
        if a.wa != b.wa {
            return a.wa.cmp(&b.wa);
        }
        if a.wb != b.wb {
            return a.wb.cmp(&b.wb);
        }
        if a.la < b.la {
            return std::cmp::Ordering::Less;
        }
        if a.la > b.la {
            return std::cmp::Ordering::Greater;
        }
        if a.lb < b.lb {
            return std::cmp::Ordering::Less;
        }
        if a.lb > b.lb {
            return std::cmp::Ordering::Greater;
        }
        a.idx.cmp(&b.idx)
    });
    keys.into_iter().map(|k| k.idx).collect()
}

/// Point count per `(win_x, win_y)` window via a hash map.
pub fn oracle_window_counts(coords: &[[f64; 2]], spec: &WindowSpec) -> HashMap<(i64, i64), usize> {
    let mut counts = HashMap::new();
    for &c in coords {
        let (x, y) = shifted(c, spec);
        let key = (
            window_and_local(x, spec.w_x).0,
            window_and_local(y, spec.w_y).0,
        );
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Attention block

fn ln_two_pass(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(c, v)| (v - mean) / denom * gamma[c] + beta[c])
        .collect()
}

/// `W[row_off..row_off+out] · x + b[row_off..]`.
fn project(w: &Mat<f64>, b: &[f64], row_off: usize, out: usize, x: &[f64]) -> Vec<f64> {
    (0..out)
        .map(|o| {
            let mut s = b[row_off + o];
            for (i, xv) in x.iter().enumerate() {
                s += w.data[(row_off + o) * w.cols + i] * xv;
            }
            s
        })
        .collect()
}

fn erf_gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `f + MHSA(LN(f) + pe)` per group, with separate Q/K/V projections and
/// an explicitly materialized score matrix per head.
pub fn oracle_attention(
    f: &Mat<f64>,
    pe: &Mat<f64>,
    p: &AttnParams<f64>,
    n_groups: usize,
) -> Mat<f64> {
    let d = p.d_model;
    let g = f.rows.checked_div(n_groups).unwrap_or(0);
    let dh = d / p.n_heads;
    let mut out = f.clone();
    for grp in 0..n_groups {
        let rows: Vec<usize> = (grp * g..(grp + 1) * g).collect();
        let h: Vec<Vec<f64>> = rows
            .iter()
            .map(|&r| {
                let n = ln_two_pass(f.row(r), &p.ln1_gamma, &p.ln1_beta);
                n.iter().zip(pe.row(r)).map(|(a, b)| a + b).collect()
            })
            .collect();
        let q: Vec<Vec<f64>> = h
            .iter()
            .map(|x| project(&p.w_qkv, &p.b_qkv, 0, d, x))
            .collect();
        let k: Vec<Vec<f64>> = h
            .iter()
            .map(|x| project(&p.w_qkv, &p.b_qkv, d, d, x))
            .collect();
        let v: Vec<Vec<f64>> = h
            .iter()
            .map(|x| project(&p.w_qkv, &p.b_qkv, 2 * d, d, x))
            .collect();

        let mut heads_out = vec![vec![0.0; d]; g];
        for head in 0..p.n_heads {
            let cols = head * dh..(head + 1) * dh;
            let mut scores = vec![vec![0.0; g]; g];
            for i in 0..g {
                for j in 0..g {
                    let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                    scores[i][j] = s / (dh as f64).sqrt();
                }
            }
            for row in scores.iter_mut() {
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = row.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (r, ev) in row.iter_mut().zip(e) {
                    *r = ev / z;
                }
            }
            for i in 0..g {
                for c in cols.clone() {
                    heads_out[i][c] = (0..g).map(|j| scores[i][j] * v[j][c]).sum();
                }
            }
        }
        for (i, &r) in rows.iter().enumerate() {
            let y = project(&p.w_out, &p.b_out, 0, d, &heads_out[i]);
            for c in 0..d {
                out.data[r * d + c] += y[c];
            }
        }
    }
    out
}

/// Attention half followed by the residual FFN.
pub fn oracle_block(f: &Mat<f64>, pe: &Mat<f64>, p: &AttnParams<f64>, n_groups: usize) -> Mat<f64> {
    let f1 = oracle_attention(f, pe, p, n_groups);
    let d = p.d_model;
    let mut out = f1.clone();
    for r in 0..f1.rows {
        let n = ln_two_pass(f1.row(r), &p.ln2_gamma, &p.ln2_beta);
        let hidden: Vec<f64> = project(&p.ffn_w1, &p.ffn_b1, 0, p.d_ff, &n)
            .into_iter()
            .map(erf_gelu)
            .collect();
        let y = project(&p.ffn_w2, &p.ffn_b2, 0, d, &hidden);
        for c in 0..d {
            out.data[r * d + c] += y[c];
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct NumericGrads {
    pub grad_f: Mat<f64>,
    pub params: AttnParams<f64>,
}

fn sum_squares(m: &Mat<f64>) -> f64 {
    m.data.iter().map(|v| v * v).sum()
}

/// Central-difference gradients of `Σ block(f)²` with respect to the input
/// features and every parameter scalar.
pub fn oracle_grad(
    f: &Mat<f64>,
    pe: &Mat<f64>,
    p: &AttnParams<f64>,
    n_groups: usize,
    cfg: &OracleConfig,
) -> NumericGrads {
    let h = cfg.fd_step;
    let loss = |f: &Mat<f64>, p: &AttnParams<f64>| sum_squares(&oracle_block(f, pe, p, n_groups));

    let mut grad_f = Mat::zeros(f.rows, f.cols);
    let mut probe = f.clone();
    for i in 0..f.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = loss(&probe, p);
        probe.data[i] = orig - h;
        let down = loss(&probe, p);
        probe.data[i] = orig;
        grad_f.data[i] = (up - down) / (2.0 * h);
    }

    let mut grads = p.clone();
    let mut probe = p.clone();
    for t in 0..12 {
        let len = probe.tensors()[t].1.len();
        for i in 0..len {
            let orig = probe.tensors()[t].1[i];
            probe.tensors_mut()[t].1[i] = orig + h;
            let up = loss(f, &probe);
            probe.tensors_mut()[t].1[i] = orig - h;
            let down = loss(f, &probe);
            probe.tensors_mut()[t].1[i] = orig;
            grads.tensors_mut()[t].1[i] = (up - down) / (2.0 * h);
        }
    }
    NumericGrads {
        grad_f,
        params: grads,
    }
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// Geometry

/// `(max pairwise distance, mean distance to centroid)` for one point set,
/// from all `O(n²)` pairs.
pub fn oracle_proximity(points: &[[f64; 2]]) -> (f64, f64) {
    let mut max_pair: f64 = 0.0;
    for a in points {
        for b in points {
            let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
            max_pair = max_pair.max(d);
        }
    }
    if points.is_empty() {
        return (0.0, 0.0);
    }
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    (max_pair, mean)
}
