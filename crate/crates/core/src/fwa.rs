//! The backbone: a stack of attention blocks over window-sorted, equally
//! sized pillar groups.
//!
//! Each block takes its window configuration from
//! [`block_schedule`](crate::flatten::block_schedule), sorts the pillars that
//! are still active, slices them into groups of `group_size`, runs the
//! attention block on the gathered groups and scatters the result back. The
//! trailing non-full group of a block is dropped for the rest of the run.
//! Coordinates never change between blocks, so a sort plan computed for one
//! `(axis, shift)` configuration is reused by later blocks with the same
//! configuration as long as no pillar has been dropped in between.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FwaError, Result};
use crate::flatten::{self, Axis, SortOutcome, SortPlan, WindowSpec};
use crate::geometry::PillarSet;
use crate::kernels::{self, AttnParams};
use crate::tensor::{linear, Mat};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Equal-size groups of `group_size` pillars.
    #[default]
    Group,
    /// One group holding every active pillar.
    Global,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FwaConfig {
    /// Pillar side length, meters.
    pub resolution: f64,
    /// Window shape in pillars.
    pub window: [usize; 2],
    pub group_size: usize,
    pub n_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Width of the pillar encoder output; projected to `d_model` when it
    /// differs.
    pub pillar_channels: usize,
    pub mode: AttentionMode,
}

impl Default for FwaConfig {
    fn default() -> Self {
        Self {
            resolution: 0.32,
            window: [9, 9],
            group_size: 69,
            n_blocks: 8,
            d_model: 128,
            n_heads: 8,
            d_ff: 256,
            pillar_channels: 128,
            mode: AttentionMode::Group,
        }
    }
}

impl FwaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FwaError::Config(m));
        if !(self.resolution > 0.0 && self.resolution.is_finite()) {
            return bad(format!(
                "resolution must be positive, got {}",
                self.resolution
            ));
        }
        if self.window[0] == 0 || self.window[1] == 0 {
            return bad(format!(
                "window must be at least 1×1 pillars, got {:?}",
                self.window
            ));
        }
        if self.group_size == 0 {
            return bad("group_size must be at least 1".into());
        }
        if self.n_blocks == 0 {
            return bad("n_blocks must be at least 1".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(4) {
            return bad(format!(
                "d_model must be a positive multiple of 4, got {}",
                self.d_model
            ));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            ));
        }
        if self.d_ff == 0 || self.pillar_channels == 0 {
            return bad("d_ff and pillar_channels must be positive".into());
        }
        Ok(())
    }

    /// Window size in meters.
    pub fn window_meters(&self) -> (f64, f64) {
        (
            self.window[0] as f64 * self.resolution,
            self.window[1] as f64 * self.resolution,
        )
    }

    /// Short stable digest of the JSON form, for labelling benchmark runs.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_prefix(&Sha256::digest(&json), 12)
    }
}

pub(crate) fn hex_prefix(bytes: &[u8], n: usize) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<String>()[..n].to_string()
}

/// Learned weights of a full backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    /// `d_model × pillar_channels` projection, present when widths differ.
    pub input_proj: Option<(Mat<f32>, Vec<f32>)>,
    pub blocks: Vec<AttnParams<f32>>,
}

impl BackboneParams {
    pub fn seeded(cfg: &FwaConfig, in_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 {
            return Err(FwaError::Config(
                "pillar features need at least one channel".into(),
            ));
        }
        let input_proj = (in_channels != cfg.d_model).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bound = 1.0 / (in_channels as f32).sqrt();
            let w = Mat::from_fn(cfg.d_model, in_channels, |_, _| {
                rng.gen_range(-bound..bound)
            });
            (w, vec![0.0; cfg.d_model])
        });
        let blocks = (0..cfg.n_blocks)
            .map(|i| {
                AttnParams::seeded(
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.d_ff,
                    seed.wrapping_add(1 + i as u64),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { input_proj, blocks })
    }

    /// Every block zeroed: attention and FFN contribute nothing.
    pub fn zeros(cfg: &FwaConfig) -> Self {
        Self {
            input_proj: None,
            blocks: (0..cfg.n_blocks)
                .map(|_| AttnParams::zeros(cfg.d_model, cfg.n_heads, cfg.d_ff))
                .collect(),
        }
    }

    pub fn project(&self, features: &Mat<f32>, d_model: usize) -> Result<Mat<f32>> {
        match &self.input_proj {
            Some((w, b)) => {
                if w.cols != features.cols || w.rows != d_model {
                    return Err(FwaError::Shape(format!(
                        "input projection is {}×{}, features have {} channels",
                        w.rows, w.cols, features.cols
                    )));
                }
                Ok(linear(features, w, b))
            }
            None if features.cols == d_model => Ok(features.clone()),
            None => Err(FwaError::Shape(format!(
                "pillar features have {} channels, d_model is {d_model} and no projection is set",
                features.cols
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub index: usize,
    pub spec: WindowSpec,
    /// Active pillars entering the block.
    pub n_in: usize,
    pub group_size: usize,
    pub n_groups: usize,
    pub sort: SortOutcome,
    /// Pillars dropped by this block (input pillar indices).
    pub dropped: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutput {
    /// One row per kept pillar, in ascending `kept_indices` order.
    pub features: Mat<f32>,
    pub coords: Vec<[f64; 2]>,
    pub kept_indices: Vec<usize>,
    pub dropped_indices: Vec<usize>,
    pub blocks: Vec<BlockRecord>,
}

impl BackboneOutput {
    pub fn n_input(&self) -> usize {
        self.kept_indices.len() + self.dropped_indices.len()
    }

    /// SHA-256 over the little-endian feature bytes.
    pub fn feature_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.features.data {
            h.update(v.to_le_bytes());
        }
        hex_prefix(&h.finalize(), 64)
    }

    pub fn summary(&self) -> BackboneSummary {
        BackboneSummary {
            n_input: self.n_input(),
            n_kept: self.kept_indices.len(),
            d_model: self.features.cols,
            kept_indices: self.kept_indices.clone(),
            dropped_indices: self.dropped_indices.clone(),
            coords: self.coords.clone(),
            row_sums: (0..self.features.rows)
                .map(|r| self.features.row(r).iter().map(|&v| v as f64).sum())
                .collect(),
            feature_sha256: self.feature_digest(),
            blocks: self.blocks.clone(),
            cache: sort_cache_stats(self),
        }
    }
}

/// JSON view of a run: coordinates, bookkeeping and feature checksums.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSummary {
    pub n_input: usize,
    pub n_kept: usize,
    pub d_model: usize,
    pub kept_indices: Vec<usize>,
    pub dropped_indices: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub row_sums: Vec<f64>,
    pub feature_sha256: String,
    pub blocks: Vec<BlockRecord>,
    pub cache: CacheStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub computed: usize,
    pub cached: usize,
}

pub fn sort_cache_stats(out: &BackboneOutput) -> CacheStats {
    let mut stats = CacheStats::default();
    for b in &out.blocks {
        match b.sort {
            SortOutcome::CacheHit => stats.cached += 1,
            SortOutcome::Computed | SortOutcome::CacheMiss => stats.computed += 1,
        }
    }
    stats
}

/// Wall time per stage, accumulated over all blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub sort: Duration,
    pub group: Duration,
    pub gather: Duration,
    pub attention: Duration,
    pub ffn: Duration,
    pub scatter: Duration,
    pub total: Duration,
}

impl StageTimes {
    pub fn stage_sum(&self) -> Duration {
        self.sort + self.group + self.gather + self.attention + self.ffn + self.scatter
    }
}

struct Stopwatch<'a>(Option<&'a mut StageTimes>);

impl Stopwatch<'_> {
    fn time<R>(&mut self, pick: fn(&mut StageTimes) -> &mut Duration, f: impl FnOnce() -> R) -> R {
        match self.0.as_deref_mut() {
            Some(t) => {
                let start = Instant::now();
                let r = f();
                *pick(t) += start.elapsed();
                r
            }
            None => f(),
        }
    }
}

pub fn run_backbone(
    pillars: &PillarSet,
    cfg: &FwaConfig,
    params: &BackboneParams,
) -> Result<BackboneOutput> {
    run_impl(pillars, cfg, params, None)
}

pub fn run_backbone_timed(
    pillars: &PillarSet,
    cfg: &FwaConfig,
    params: &BackboneParams,
) -> Result<(BackboneOutput, StageTimes)> {
    let mut times = StageTimes::default();
    let start = Instant::now();
    let out = run_impl(pillars, cfg, params, Some(&mut times))?;
    times.total = start.elapsed();
    Ok((out, times))
}

fn run_impl(
    pillars: &PillarSet,
    cfg: &FwaConfig,
    params: &BackboneParams,
    times: Option<&mut StageTimes>,
) -> Result<BackboneOutput> {
    cfg.validate()?;
    if params.blocks.len() != cfg.n_blocks {
        return Err(FwaError::Config(format!(
            "{} block parameter sets supplied for {} blocks",
            params.blocks.len(),
            cfg.n_blocks
        )));
    }
    let features = params.project(&pillars.features.cast::<f32>(), cfg.d_model)?;
    run_blocks(features, &pillars.coords, cfg, &params.blocks, 0, times)
}

/// Runs `blocks` as schedule positions `first_block..first_block + len`
/// on already projected features.
pub fn run_blocks(
    mut features: Mat<f32>,
    coords: &[[f64; 2]],
    cfg: &FwaConfig,
    blocks: &[AttnParams<f32>],
    first_block: usize,
    times: Option<&mut StageTimes>,
) -> Result<BackboneOutput> {
    cfg.validate()?;
    if features.rows != coords.len() || features.cols != cfg.d_model {
        return Err(FwaError::Shape(format!(
            "features are {}×{}, expected {}×{}",
            features.rows,
            features.cols,
            coords.len(),
            cfg.d_model
        )));
    }
    let (w_x, w_y) = cfg.window_meters();
    let schedule = flatten::block_schedule(first_block + blocks.len(), w_x, w_y)?;
    let pe_all = kernels::positional_embedding::<f32>(coords, cfg.d_model)?;

    let mut watch = Stopwatch(times);
    let mut active: Vec<usize> = (0..coords.len()).collect();
    let mut dropped_all = Vec::new();
    let mut records = Vec::with_capacity(blocks.len());
    // Bumped whenever the active set shrinks; plans from older versions are stale.
    let mut version = 0u64;
    let mut plans: HashMap<(Axis, bool), (SortPlan, u64)> = HashMap::new();

    for (offset, block) in blocks.iter().enumerate() {
        let index = first_block + offset;
        let spec = schedule[index];
        let key = (spec.major_axis, spec.shift);

        let active_coords: Vec<[f64; 2]> = active.iter().map(|&i| coords[i]).collect();
        let (plan, outcome) = watch.time(
            |t| &mut t.sort,
            || match plans.get(&key) {
                Some((plan, v)) if *v == version => {
                    let s = flatten::sort(&active_coords, &spec, Some(plan));
                    (s.plan, s.outcome)
                }
                Some(_) => (
                    flatten::sort(&active_coords, &spec, None).plan,
                    SortOutcome::CacheMiss,
                ),
                None => {
                    let s = flatten::sort(&active_coords, &spec, None);
                    (s.plan, s.outcome)
                }
            },
        );
        plans.insert(key, (plan.clone(), version));

        let group_size = match cfg.mode {
            AttentionMode::Group => cfg.group_size,
            AttentionMode::Global => active.len().max(1),
        };
        let grouping = watch.time(|t| &mut t.group, || flatten::group(&plan, group_size))?;
        if grouping.n_groups == 0 {
            return Err(FwaError::Aborted {
                block: index,
                reason: format!(
                    "{} active pillars cannot fill a group of {group_size}",
                    active.len()
                ),
            });
        }

        let members: Vec<usize> = grouping.member_indices.iter().map(|&l| active[l]).collect();
        let (x, pe) = watch.time(
            |t| &mut t.gather,
            || (features.gather_rows(&members), pe_all.gather_rows(&members)),
        );
        let f1 = watch.time(
            |t| &mut t.attention,
            || kernels::group_attention_infer(&x, &pe, block, grouping.n_groups),
        )?;
        let out = watch.time(|t| &mut t.ffn, || kernels::ffn_forward(&f1, block))?;
        watch.time(
            |t| &mut t.scatter,
            || {
                for (k, &gi) in members.iter().enumerate() {
                    features.row_mut(gi).copy_from_slice(out.row(k));
                }
            },
        );

        let dropped: Vec<usize> = grouping.dropped.iter().map(|&l| active[l]).collect();
        if !dropped.is_empty() {
            let mut is_dropped = vec![false; coords.len()];
            for &d in &dropped {
                is_dropped[d] = true;
            }
            active.retain(|&i| !is_dropped[i]);
            dropped_all.extend_from_slice(&dropped);
            version += 1;
        }
        records.push(BlockRecord {
            index,
            spec,
            n_in: grouping.n_points(),
            group_size,
            n_groups: grouping.n_groups,
            sort: outcome,
            dropped,
        });
    }

    // `active` stays in ascending input order.
    Ok(BackboneOutput {
        features: features.gather_rows(&active),
        coords: active.iter().map(|&i| coords[i]).collect(),
        kept_indices: active,
        dropped_indices: dropped_all,
        blocks: records,
    })
}
