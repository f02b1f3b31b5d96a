//! One attention block over equally sized groups:
//!
//! ```text
//! F'  = F  + MHSA(LN(F) + PE)
//! F'' = F' + W2·GELU(W1·LN(F') + b1) + b2
//! ```
//!
//! Features of all groups are stored as one `(n_groups·G) × D` matrix with
//! each group's rows contiguous. Groups never interact, so they are
//! processed in parallel; every reduction runs serially inside its group,
//! which keeps results bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use super::params::AttnParams;
use super::{gelu_grad, gelu_t, normalize_row, softmax_in_place};
use crate::error::{FwaError, Result};
use crate::tensor::{dot, linear, Mat, Real};

/// Intermediates of the attention half saved for the backward pass.
#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    pub n_groups: usize,
    pub group_size: usize,
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
    /// LN output plus positional embedding; the input of the QKV projection.
    pub h: Mat<T>,
    pub qkv: Mat<T>,
    /// Softmax outputs, laid out `[group][head][query][key]`.
    pub probs: Vec<T>,
    /// Concatenated head outputs, before the output projection.
    pub concat: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct FfnCache<T> {
    pub xhat: Mat<T>,
    pub rstd: Vec<T>,
    /// Pre-activation of the first linear layer.
    pub z: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    pub attn: AttnCache<T>,
    pub ffn: FfnCache<T>,
    params: AttnParams<T>,
}

impl<T> BlockCache<T> {
    pub fn params(&self) -> &AttnParams<T> {
        &self.params
    }
}

#[derive(Clone, Debug)]
pub struct BlockGrads<T> {
    pub grad_f: Mat<T>,
    pub grad_pe: Mat<T>,
    pub params: AttnParams<T>,
}

#[derive(Default)]
struct GroupSaved<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    h: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    concat: Vec<T>,
}

fn check_inputs<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    n_groups: usize,
) -> Result<usize> {
    params.validate()?;
    if f.cols != params.d_model {
        return Err(FwaError::Shape(format!(
            "features have {} channels, block expects {}",
            f.cols, params.d_model
        )));
    }
    if (pe.rows, pe.cols) != (f.rows, f.cols) {
        return Err(FwaError::Shape(format!(
            "positional embedding is {}×{}, features are {}×{}",
            pe.rows, pe.cols, f.rows, f.cols
        )));
    }
    let group_size = match n_groups {
        0 if f.rows == 0 => 0,
        0 => {
            return Err(FwaError::Shape(format!(
                "{} rows cannot form zero groups",
                f.rows
            )))
        }
        n if f.rows.is_multiple_of(n) => f.rows / n,
        n => {
            return Err(FwaError::Shape(format!(
                "{} rows do not split into {n} equal groups",
                f.rows
            )))
        }
    };
    if !f.is_finite() || !pe.is_finite() {
        return Err(FwaError::Numeric("non-finite attention input".into()));
    }
    Ok(group_size)
}

/// Attention for a single group. Each query row computes its scores,
/// softmax and weighted sum in one pass; the `G × G` probabilities are only
/// kept when `save` is requested. Keys at positions `>= valid` are padding
/// and receive zero weight.
fn attend_group<T: Real>(
    f: &[T],
    pe: &[T],
    p: &AttnParams<T>,
    g: usize,
    valid: usize,
    save: Option<&mut GroupSaved<T>>,
) -> Vec<T> {
    let d = p.d_model;
    let heads = p.n_heads;
    let dh = p.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut xhat = vec![T::zero(); g * d];
    let mut rstd = Vec::with_capacity(g);
    let mut h = Mat::zeros(g, d);
    for i in 0..g {
        let xr = &mut xhat[i * d..(i + 1) * d];
        rstd.push(normalize_row(&f[i * d..(i + 1) * d], xr));
        let hr = h.row_mut(i);
        for c in 0..d {
            hr[c] = xr[c] * p.ln1_gamma[c] + p.ln1_beta[c] + pe[i * d + c];
        }
    }
    let qkv = linear(&h, &p.w_qkv, &p.b_qkv);

    let keep_probs = save.is_some();
    let mut probs = if keep_probs {
        vec![T::zero(); heads * g * g]
    } else {
        Vec::new()
    };
    let mut scratch = vec![T::zero(); g];
    let mut concat = Mat::zeros(g, d);
    for a in 0..heads {
        let (qo, ko, vo) = (a * dh, d + a * dh, 2 * d + a * dh);
        for i in 0..g {
            let q = &qkv.row(i)[qo..qo + dh];
            let row: &mut [T] = if keep_probs {
                &mut probs[(a * g + i) * g..(a * g + i + 1) * g]
            } else {
                &mut scratch
            };
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(q, &qkv.row(j)[ko..ko + dh]) * scale;
                if j >= valid {
                    *s = T::neg_infinity();
                }
            }
            softmax_in_place(row);
            let out = &mut concat.row_mut(i)[qo..qo + dh];
            for (j, &w) in row.iter().enumerate() {
                let v = &qkv.row(j)[vo..vo + dh];
                for (o, vv) in out.iter_mut().zip(v) {
                    *o = *o + w * *vv;
                }
            }
        }
    }

    let y = linear(&concat, &p.w_out, &p.b_out);
    let out: Vec<T> = f.iter().zip(&y.data).map(|(a, b)| *a + *b).collect();

    if let Some(s) = save {
        s.xhat = xhat;
        s.rstd = rstd;
        s.h = h.data;
        s.qkv = qkv.data;
        s.probs = probs;
        s.concat = concat.data;
    }
    out
}

/// Residual attention half of the block, keeping intermediates for
/// [`fwa_block_backward`].
pub fn group_attention_forward<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    n_groups: usize,
) -> Result<(Mat<T>, AttnCache<T>)> {
    let g = check_inputs(f, pe, params, n_groups)?;
    let d = params.d_model;
    let mut saved: Vec<GroupSaved<T>> = (0..n_groups).map(|_| GroupSaved::default()).collect();
    let outs: Vec<Vec<T>> = if n_groups == 0 {
        Vec::new()
    } else {
        f.data
            .par_chunks(g * d)
            .zip(pe.data.par_chunks(g * d))
            .zip(saved.par_iter_mut())
            .map(|((fg, peg), s)| attend_group(fg, peg, params, g, g, Some(s)))
            .collect()
    };

    let rows = f.rows;
    let mut cache = AttnCache {
        n_groups,
        group_size: g,
        xhat: Mat::zeros(0, d),
        rstd: Vec::with_capacity(rows),
        h: Mat::zeros(0, d),
        qkv: Mat::zeros(0, 3 * d),
        probs: Vec::new(),
        concat: Mat::zeros(0, d),
    };
    let mut xhat = Vec::with_capacity(rows * d);
    let mut h = Vec::with_capacity(rows * d);
    let mut qkv = Vec::with_capacity(rows * 3 * d);
    let mut concat = Vec::with_capacity(rows * d);
    for s in saved {
        xhat.extend(s.xhat);
        cache.rstd.extend(s.rstd);
        h.extend(s.h);
        qkv.extend(s.qkv);
        cache.probs.extend(s.probs);
        concat.extend(s.concat);
    }
    cache.xhat = Mat::from_vec(rows, d, xhat);
    cache.h = Mat::from_vec(rows, d, h);
    cache.qkv = Mat::from_vec(rows, 3 * d, qkv);
    cache.concat = Mat::from_vec(rows, d, concat);
    Ok((Mat::from_vec(rows, d, outs.concat()), cache))
}

/// Inference-only attention half: nothing but the output is materialized.
pub fn group_attention_infer<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    n_groups: usize,
) -> Result<Mat<T>> {
    let g = check_inputs(f, pe, params, n_groups)?;
    if n_groups == 0 {
        return Ok(Mat::zeros(0, params.d_model));
    }
    let d = params.d_model;
    let outs: Vec<Vec<T>> = f
        .data
        .par_chunks(g * d)
        .zip(pe.data.par_chunks(g * d))
        .map(|(fg, peg)| attend_group(fg, peg, params, g, g, None))
        .collect();
    Ok(Mat::from_vec(f.rows, d, outs.concat()))
}

/// Attention over zero-padded windows: group `i` occupies rows
/// `i·padded_len..(i+1)·padded_len` of `f`, of which only the first
/// `valid[i]` are real tokens. Every padded row is still projected and
/// scored, matching what a fixed-length batched kernel spends.
pub fn group_attention_padded<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    valid: &[usize],
) -> Result<Mat<T>> {
    let g = check_inputs(f, pe, params, valid.len())?;
    if valid.iter().any(|&v| v == 0 || v > g) {
        return Err(FwaError::Shape(format!(
            "valid lengths must lie in 1..={g}"
        )));
    }
    if valid.is_empty() {
        return Ok(Mat::zeros(0, params.d_model));
    }
    let d = params.d_model;
    let outs: Vec<Vec<T>> = f
        .data
        .par_chunks(g * d)
        .zip(pe.data.par_chunks(g * d))
        .zip(valid.par_iter())
        .map(|((fg, peg), &v)| attend_group(fg, peg, params, g, v, None))
        .collect();
    Ok(Mat::from_vec(f.rows, d, outs.concat()))
}

struct FfnScratch<T> {
    xhat: Vec<T>,
    n: Vec<T>,
    act: Vec<T>,
}

/// One FFN row. GELU is applied as each hidden unit is produced, so only a
/// `D_ff` row buffer exists at a time.
fn ffn_row<T: Real>(
    x: &[T],
    p: &AttnParams<T>,
    out: &mut [T],
    s: &mut FfnScratch<T>,
    z_out: Option<&mut [T]>,
) -> T {
    let rstd = normalize_row(x, &mut s.xhat);
    for c in 0..x.len() {
        s.n[c] = s.xhat[c] * p.ln2_gamma[c] + p.ln2_beta[c];
    }
    let mut z_out = z_out;
    for k in 0..p.d_ff {
        let z = dot(p.ffn_w1.row(k), &s.n) + p.ffn_b1[k];
        if let Some(zs) = z_out.as_deref_mut() {
            zs[k] = z;
        }
        s.act[k] = gelu_t(z);
    }
    for (c, o) in out.iter_mut().enumerate() {
        *o = x[c] + dot(p.ffn_w2.row(c), &s.act) + p.ffn_b2[c];
    }
    rstd
}

fn check_ffn<T: Real>(x: &Mat<T>, params: &AttnParams<T>) -> Result<()> {
    params.validate()?;
    if x.cols != params.d_model {
        return Err(FwaError::Shape(format!(
            "FFN input has {} channels, expected {}",
            x.cols, params.d_model
        )));
    }
    if !x.is_finite() {
        return Err(FwaError::Numeric("non-finite FFN input".into()));
    }
    Ok(())
}

/// `x + W2·GELU(W1·LN(x) + b1) + b2`, row by row.
pub fn ffn_forward<T: Real>(x: &Mat<T>, params: &AttnParams<T>) -> Result<Mat<T>> {
    check_ffn(x, params)?;
    let d = params.d_model;
    let mut out = Mat::zeros(x.rows, d);
    out.data
        .par_chunks_mut(d)
        .zip(x.data.par_chunks(d))
        .for_each_init(
            || FfnScratch {
                xhat: vec![T::zero(); d],
                n: vec![T::zero(); d],
                act: vec![T::zero(); params.d_ff],
            },
            |s, (o, xr)| {
                ffn_row(xr, params, o, s, None);
            },
        );
    Ok(out)
}

fn ffn_forward_cached<T: Real>(x: &Mat<T>, p: &AttnParams<T>) -> Result<(Mat<T>, FfnCache<T>)> {
    check_ffn(x, p)?;
    let d = p.d_model;
    let mut out = Mat::zeros(x.rows, d);
    let mut cache = FfnCache {
        xhat: Mat::zeros(x.rows, d),
        rstd: Vec::with_capacity(x.rows),
        z: Mat::zeros(x.rows, p.d_ff),
    };
    let mut s = FfnScratch {
        xhat: vec![T::zero(); d],
        n: vec![T::zero(); d],
        act: vec![T::zero(); p.d_ff],
    };
    for r in 0..x.rows {
        let rstd = ffn_row(
            x.row(r),
            p,
            out.row_mut(r),
            &mut s,
            Some(cache.z.row_mut(r)),
        );
        cache.rstd.push(rstd);
        cache.xhat.row_mut(r).copy_from_slice(&s.xhat);
    }
    Ok((out, cache))
}

/// Full block forward keeping everything the backward pass needs.
pub fn fwa_block_forward<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    n_groups: usize,
) -> Result<(Mat<T>, BlockCache<T>)> {
    let (f1, attn) = group_attention_forward(f, pe, params, n_groups)?;
    let (out, ffn) = ffn_forward_cached(&f1, params)?;
    Ok((
        out,
        BlockCache {
            attn,
            ffn,
            params: params.clone(),
        },
    ))
}

pub fn fwa_block_infer<T: Real>(
    f: &Mat<T>,
    pe: &Mat<T>,
    params: &AttnParams<T>,
    n_groups: usize,
) -> Result<Mat<T>> {
    let f1 = group_attention_infer(f, pe, params, n_groups)?;
    ffn_forward(&f1, params)
}

// ---------------------------------------------------------------------------
// Backward

/// `a (R×K) · b (K×C)`.
fn matmul<T: Real>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        let orow = &mut out.data[r * b.cols..(r + 1) * b.cols];
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(b.row(k)) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

/// `gyᵀ · x`: weight gradient of a linear layer, `O × I`.
fn outer_sum<T: Real>(gy: &Mat<T>, x: &Mat<T>) -> Mat<T> {
    debug_assert_eq!(gy.rows, x.rows);
    let mut out = Mat::zeros(gy.cols, x.cols);
    for r in 0..gy.rows {
        let xr = x.row(r);
        for (o, &g) in gy.row(r).iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            for (w, xv) in out.row_mut(o).iter_mut().zip(xr) {
                *w = *w + g * *xv;
            }
        }
    }
    out
}

fn col_sums<T: Real>(m: &Mat<T>) -> Vec<T> {
    let mut out = vec![T::zero(); m.cols];
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o = *o + *v;
        }
    }
    out
}

/// Backprop through `y = x̂·γ + β`. Accumulates γ/β gradients and adds the
/// input gradient into `grad_x`.
#[allow(clippy::needless_range_loop)]
fn layer_norm_backward<T: Real>(
    grad_y: &Mat<T>,
    xhat: &Mat<T>,
    rstd: &[T],
    gamma: &[T],
    grad_gamma: &mut [T],
    grad_beta: &mut [T],
    grad_x: &mut Mat<T>,
) {
    let d = grad_y.cols;
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut gxhat = vec![T::zero(); d];
    for r in 0..grad_y.rows {
        let gy = grad_y.row(r);
        let xh = xhat.row(r);
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for c in 0..d {
            grad_gamma[c] = grad_gamma[c] + gy[c] * xh[c];
            grad_beta[c] = grad_beta[c] + gy[c];
            gxhat[c] = gy[c] * gamma[c];
            mean_g = mean_g + gxhat[c];
            mean_gx = mean_gx + gxhat[c] * xh[c];
        }
        mean_g = mean_g * inv_d;
        mean_gx = mean_gx * inv_d;
        let gx = grad_x.row_mut(r);
        for c in 0..d {
            gx[c] = gx[c] + rstd[r] * (gxhat[c] - mean_g - xh[c] * mean_gx);
        }
    }
}

/// Reverse-mode gradients of the whole block with respect to the input
/// features, the positional embedding and every parameter tensor.
pub fn fwa_block_backward<T: Real>(
    grad_out: &Mat<T>,
    cache: &BlockCache<T>,
) -> Result<BlockGrads<T>> {
    let p = &cache.params;
    let a = &cache.attn;
    let d = p.d_model;
    let rows = a.n_groups * a.group_size;
    if (grad_out.rows, grad_out.cols) != (rows, d)
        || cache.ffn.z.rows != rows
        || a.probs.len() != a.n_groups * p.n_heads * a.group_size * a.group_size
    {
        return Err(FwaError::Contract(format!(
            "gradient is {}×{} but the cached forward covered {rows}×{d}",
            grad_out.rows, grad_out.cols
        )));
    }
    let mut gp = AttnParams::<T>::zeros(d, p.n_heads, p.d_ff);
    for (_, t) in gp.tensors_mut() {
        t.iter_mut().for_each(|v| *v = T::zero());
    }

    // FFN half: out = f1 + W2·gelu(z) + b2, z = W1·n2 + b1.
    let ffn = &cache.ffn;
    let act = Mat::from_vec(
        rows,
        p.d_ff,
        ffn.z.data.iter().map(|&z| gelu_t(z)).collect(),
    );
    gp.ffn_b2 = col_sums(grad_out);
    gp.ffn_w2 = outer_sum(grad_out, &act);
    let mut g_z = matmul(grad_out, &p.ffn_w2);
    for (g, z) in g_z.data.iter_mut().zip(&ffn.z.data) {
        *g = *g * T::of(gelu_grad(z.as_f64()));
    }
    let n2 = Mat::from_fn(rows, d, |r, c| {
        ffn.xhat.get(r, c) * p.ln2_gamma[c] + p.ln2_beta[c]
    });
    gp.ffn_w1 = outer_sum(&g_z, &n2);
    gp.ffn_b1 = col_sums(&g_z);
    let g_n2 = matmul(&g_z, &p.ffn_w1);
    let mut g_f1 = grad_out.clone();
    layer_norm_backward(
        &g_n2,
        &ffn.xhat,
        &ffn.rstd,
        &p.ln2_gamma,
        &mut gp.ln2_gamma,
        &mut gp.ln2_beta,
        &mut g_f1,
    );

    // Attention half: f1 = f + W_out·concat + b_out.
    gp.b_out = col_sums(&g_f1);
    gp.w_out = outer_sum(&g_f1, &a.concat);
    let g_concat = matmul(&g_f1, &p.w_out);

    let g = a.group_size;
    let dh = p.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut g_qkv = Mat::zeros(rows, 3 * d);
    let mut g_p = vec![T::zero(); g];
    for grp in 0..a.n_groups {
        let base = grp * g;
        for head in 0..p.n_heads {
            let (qo, ko, vo) = (head * dh, d + head * dh, 2 * d + head * dh);
            for i in 0..g {
                let probs = &a.probs[((grp * p.n_heads + head) * g + i) * g..][..g];
                let go = &g_concat.row(base + i)[qo..qo + dh];
                // dP_ij = dO_i · v_j ; dV_j += P_ij dO_i
                for j in 0..g {
                    g_p[j] = dot(go, &a.qkv.row(base + j)[vo..vo + dh]);
                    let gv = &mut g_qkv.row_mut(base + j)[vo..vo + dh];
                    for (x, o) in gv.iter_mut().zip(go) {
                        *x = *x + probs[j] * *o;
                    }
                }
                // Softmax Jacobian.
                let inner = dot(probs, &g_p);
                for j in 0..g {
                    let gs = probs[j] * (g_p[j] - inner) * scale;
                    if gs == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kj = a.qkv.get(base + j, ko + c);
                        let qi = a.qkv.get(base + i, qo + c);
                        let gq = g_qkv.get(base + i, qo + c);
                        g_qkv.set(base + i, qo + c, gq + gs * kj);
                        let gk = g_qkv.get(base + j, ko + c);
                        g_qkv.set(base + j, ko + c, gk + gs * qi);
                    }
                }
            }
        }
    }

    gp.w_qkv = outer_sum(&g_qkv, &a.h);
    gp.b_qkv = col_sums(&g_qkv);
    let g_h = matmul(&g_qkv, &p.w_qkv);
    let mut grad_f = g_f1;
    layer_norm_backward(
        &g_h,
        &a.xhat,
        &a.rstd,
        &p.ln1_gamma,
        &mut gp.ln1_gamma,
        &mut gp.ln1_beta,
        &mut grad_f,
    );

    Ok(BlockGrads {
        grad_f,
        grad_pe: g_h,
        params: gp,
    })
}
