use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FwaError, Result};
use crate::tensor::{Mat, Real};

pub const PARAMS_MAGIC: &[u8; 4] = b"FWAP";

/// Weights of one attention block (attention + FFN + both layer norms).
/// Linear weights are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Packed Q, K, V projections, `3D × D` (rows `0..D` are Q).
    pub w_qkv: Mat<T>,
    pub b_qkv: Vec<T>,
    pub w_out: Mat<T>,
    pub b_out: Vec<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub ffn_w1: Mat<T>,
    pub ffn_b1: Vec<T>,
    pub ffn_w2: Mat<T>,
    pub ffn_b2: Vec<T>,
}

impl<T: Real> AttnParams<T> {
    /// All weights and biases zero, layer norms at identity.
    pub fn zeros(d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        Self {
            d_model,
            n_heads,
            d_ff,
            w_qkv: Mat::zeros(3 * d_model, d_model),
            b_qkv: vec![T::zero(); 3 * d_model],
            w_out: Mat::zeros(d_model, d_model),
            b_out: vec![T::zero(); d_model],
            ln1_gamma: vec![T::one(); d_model],
            ln1_beta: vec![T::zero(); d_model],
            ln2_gamma: vec![T::one(); d_model],
            ln2_beta: vec![T::zero(); d_model],
            ffn_w1: Mat::zeros(d_ff, d_model),
            ffn_b1: vec![T::zero(); d_ff],
            ffn_w2: Mat::zeros(d_model, d_ff),
            ffn_b2: vec![T::zero(); d_model],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases, identity layer norms.
    pub fn seeded(d_model: usize, n_heads: usize, d_ff: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(d_model, n_heads, d_ff);
        p.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in [&mut p.w_qkv, &mut p.w_out, &mut p.ffn_w1, &mut p.ffn_w2] {
            let bound = 1.0 / (m.cols as f64).sqrt();
            for v in m.data.iter_mut() {
                *v = T::of(rng.gen_range(-bound..bound));
            }
        }
        Ok(p)
    }

    /// Like [`seeded`](Self::seeded) but biases and layer-norm affine terms
    /// are randomized too, so every tensor carries signal.
    pub fn seeded_full(d_model: usize, n_heads: usize, d_ff: usize, seed: u64) -> Result<Self> {
        let mut p = Self::seeded(d_model, n_heads, d_ff, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for b in [
            &mut p.b_qkv,
            &mut p.b_out,
            &mut p.ffn_b1,
            &mut p.ffn_b2,
            &mut p.ln1_beta,
            &mut p.ln2_beta,
        ] {
            for v in b.iter_mut() {
                *v = T::of(rng.gen_range(-0.2..0.2));
            }
        }
        for g in [&mut p.ln1_gamma, &mut p.ln2_gamma] {
            for v in g.iter_mut() {
                *v = T::of(rng.gen_range(0.7..1.3));
            }
        }
        Ok(p)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model;
        if d == 0 || self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(FwaError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                d, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(FwaError::Config("d_ff must be positive".into()));
        }
        let shapes = [
            ("w_qkv", (self.w_qkv.rows, self.w_qkv.cols), (3 * d, d)),
            ("w_out", (self.w_out.rows, self.w_out.cols), (d, d)),
            (
                "ffn_w1",
                (self.ffn_w1.rows, self.ffn_w1.cols),
                (self.d_ff, d),
            ),
            (
                "ffn_w2",
                (self.ffn_w2.rows, self.ffn_w2.cols),
                (d, self.d_ff),
            ),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(FwaError::Shape(format!(
                    "{name} is {got:?}, expected {want:?}"
                )));
            }
        }
        let lens = self.vector_lengths();
        for (name, got, want) in lens {
            if got != want {
                return Err(FwaError::Shape(format!(
                    "{name} has length {got}, expected {want}"
                )));
            }
        }
        if self
            .tensors()
            .iter()
            .any(|(_, t)| t.iter().any(|v| !v.is_finite()))
        {
            return Err(FwaError::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    fn vector_lengths(&self) -> [(&'static str, usize, usize); 8] {
        let d = self.d_model;
        [
            ("b_qkv", self.b_qkv.len(), 3 * d),
            ("b_out", self.b_out.len(), d),
            ("ln1_gamma", self.ln1_gamma.len(), d),
            ("ln1_beta", self.ln1_beta.len(), d),
            ("ln2_gamma", self.ln2_gamma.len(), d),
            ("ln2_beta", self.ln2_beta.len(), d),
            ("ffn_b1", self.ffn_b1.len(), self.d_ff),
            ("ffn_b2", self.ffn_b2.len(), d),
        ]
    }

    /// Every tensor in serialization order.
    pub fn tensors(&self) -> [(&'static str, &[T]); 12] {
        [
            ("w_qkv", &self.w_qkv.data),
            ("b_qkv", &self.b_qkv),
            ("w_out", &self.w_out.data),
            ("b_out", &self.b_out),
            ("ln1_gamma", &self.ln1_gamma),
            ("ln1_beta", &self.ln1_beta),
            ("ln2_gamma", &self.ln2_gamma),
            ("ln2_beta", &self.ln2_beta),
            ("ffn_w1", &self.ffn_w1.data),
            ("ffn_b1", &self.ffn_b1),
            ("ffn_w2", &self.ffn_w2.data),
            ("ffn_b2", &self.ffn_b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<T>); 12] {
        [
            ("w_qkv", &mut self.w_qkv.data),
            ("b_qkv", &mut self.b_qkv),
            ("w_out", &mut self.w_out.data),
            ("b_out", &mut self.b_out),
            ("ln1_gamma", &mut self.ln1_gamma),
            ("ln1_beta", &mut self.ln1_beta),
            ("ln2_gamma", &mut self.ln2_gamma),
            ("ln2_beta", &mut self.ln2_beta),
            ("ffn_w1", &mut self.ffn_w1.data),
            ("ffn_b1", &mut self.ffn_b1),
            ("ffn_w2", &mut self.ffn_w2.data),
            ("ffn_b2", &mut self.ffn_b2),
        ]
    }

    pub fn cast<U: Real>(&self) -> AttnParams<U> {
        let v = |x: &[T]| x.iter().map(|a| U::of(a.as_f64())).collect::<Vec<U>>();
        AttnParams {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            w_qkv: self.w_qkv.cast(),
            b_qkv: v(&self.b_qkv),
            w_out: self.w_out.cast(),
            b_out: v(&self.b_out),
            ln1_gamma: v(&self.ln1_gamma),
            ln1_beta: v(&self.ln1_beta),
            ln2_gamma: v(&self.ln2_gamma),
            ln2_beta: v(&self.ln2_beta),
            ffn_w1: self.ffn_w1.cast(),
            ffn_b1: v(&self.ffn_b1),
            ffn_w2: self.ffn_w2.cast(),
            ffn_b2: v(&self.ffn_b2),
        }
    }
}

/// Writes one `FWAP` blob per block, back to back.
pub fn write_params<W: Write>(blocks: &[AttnParams<f32>], out: &mut W) -> Result<()> {
    for p in blocks {
        out.write_all(PARAMS_MAGIC)?;
        for dim in [p.d_model, p.n_heads, p.d_ff] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for (_, t) in p.tensors() {
            for v in t {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads every `FWAP` blob in the stream.
pub fn read_params<R: Read>(mut input: R) -> Result<Vec<AttnParams<f32>>> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut blocks = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = buf
            .get(*pos..*pos + n)
            .ok_or_else(|| FwaError::Schema("truncated parameter blob".into()))?;
        *pos += n;
        Ok(s)
    };
    while pos < buf.len() {
        if take(&mut pos, 4)? != PARAMS_MAGIC {
            return Err(FwaError::Schema("missing FWAP magic".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            *d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let [d, h, ff] = dims;
        if d == 0 || h == 0 || d % h != 0 || ff == 0 {
            return Err(FwaError::Schema(format!(
                "invalid block dims D={d} H={h} D_ff={ff}"
            )));
        }
        let mut p = AttnParams::<f32>::zeros(d, h, ff);
        for (_, t) in p.tensors_mut() {
            let bytes = take(&mut pos, t.len() * 4)?;
            for (v, c) in t.iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
        p.validate()?;
        blocks.push(p);
    }
    Ok(blocks)
}
