//! Wall-clock measurement of the attention backbone.
//!
//! A measurement runs `warmup` untimed iterations, then `runs` timed ones.
//! Samples outside `[Q1 − 3·IQR, Q3 + 3·IQR]` are excluded before computing
//! mean and percentiles.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{FwaError, Result};
use crate::flatten::{Axis, WindowSpec};
use crate::fwa::{run_blocks, AttentionMode, BackboneParams, FwaConfig, StageTimes};
use crate::geometry::{PillarEncoder, PillarSet, PointCloud};
use crate::kernels::{self, AttnParams};
use crate::tensor::Mat;
use crate::workload::{self, percentile};

pub const DEFAULT_RUNS: usize = 50;
pub const DEFAULT_WARMUP: usize = 10;
pub const OUTLIER_IQR_FACTOR: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Protocol {
    pub runs: usize,
    pub warmup: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            runs: DEFAULT_RUNS,
            warmup: DEFAULT_WARMUP,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
}

/// Mean per-stage time over the kept runs, milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageMillis {
    pub sort: f64,
    pub group: f64,
    pub gather: f64,
    pub attention: f64,
    pub ffn: f64,
    pub scatter: f64,
    pub total: f64,
}

impl StageMillis {
    pub fn stage_sum(&self) -> f64 {
        self.sort + self.group + self.gather + self.attention + self.ffn + self.scatter
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    /// Equal-size groups.
    Group,
    /// One group of all tokens.
    Global,
    /// Equal-window partition with bucketed padding.
    Window,
}

impl BenchMode {
    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Group => "group",
            BenchMode::Global => "global",
            BenchMode::Window => "window",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub name: String,
    pub mode: BenchMode,
    pub scene: String,
    pub n_points: usize,
    pub config_digest: String,
    pub runs: usize,
    pub warmup: usize,
    /// Milliseconds, over the runs that survived outlier exclusion.
    pub wall_time_ms: TimingStats,
    pub outliers_excluded: usize,
    pub stage_ms: StageMillis,
}

/// Splits samples into those within the `3·IQR` fences and a count of the
/// rest. Fewer than four samples are kept as is.
pub fn exclude_outliers(samples: &[f64]) -> (Vec<f64>, usize) {
    if samples.len() < 4 {
        return (samples.to_vec(), 0);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = percentile(&sorted, 0.25);
    let q3 = percentile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - OUTLIER_IQR_FACTOR * iqr, q3 + OUTLIER_IQR_FACTOR * iqr);
    let kept: Vec<f64> = samples
        .iter()
        .copied()
        .filter(|v| *v >= lo && *v <= hi)
        .collect();
    let excluded = samples.len() - kept.len();
    (kept, excluded)
}

pub fn timing_stats(samples: &[f64]) -> TimingStats {
    if samples.is_empty() {
        return TimingStats::default();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    TimingStats {
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
    }
}

pub struct Measurement {
    pub wall_time_ms: TimingStats,
    pub outliers_excluded: usize,
    pub stage_ms: StageMillis,
}

/// Runs `body` per the protocol; `body` returns its own stage breakdown.
pub fn measure(
    protocol: Protocol,
    mut body: impl FnMut() -> Result<StageTimes>,
) -> Result<Measurement> {
    if protocol.runs == 0 {
        return Err(FwaError::Config(
            "at least one timed run is required".into(),
        ));
    }
    for _ in 0..protocol.warmup {
        body()?;
    }
    let mut totals = Vec::with_capacity(protocol.runs);
    let mut stages = Vec::with_capacity(protocol.runs);
    for _ in 0..protocol.runs {
        let start = Instant::now();
        let mut t = body()?;
        t.total = start.elapsed();
        totals.push(t.total.as_secs_f64() * 1e3);
        stages.push(t);
    }
    let (kept, excluded) = exclude_outliers(&totals);
    let kept_stages: Vec<&StageTimes> = stages
        .iter()
        .zip(&totals)
        .filter(|(_, ms)| kept.contains(ms))
        .map(|(s, _)| s)
        .collect();
    let n = kept_stages.len().max(1) as f64;
    let avg = |f: fn(&StageTimes) -> std::time::Duration| {
        kept_stages
            .iter()
            .map(|s| f(s).as_secs_f64() * 1e3)
            .sum::<f64>()
            / n
    };
    Ok(Measurement {
        wall_time_ms: timing_stats(&kept),
        outliers_excluded: excluded,
        stage_ms: StageMillis {
            sort: avg(|s| s.sort),
            group: avg(|s| s.group),
            gather: avg(|s| s.gather),
            attention: avg(|s| s.attention),
            ffn: avg(|s| s.ffn),
            scatter: avg(|s| s.scatter),
            total: avg(|s| s.total),
        },
    })
}

/// Tokens entering the backbone: BEV positions plus `d_model`-wide features.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokens {
    pub coords: Vec<[f64; 2]>,
    pub features: Mat<f32>,
}

impl Tokens {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn from_pillars(
        pillars: &PillarSet,
        params: &BackboneParams,
        d_model: usize,
    ) -> Result<Self> {
        Ok(Self {
            coords: pillars.coords.clone(),
            features: params.project(&pillars.features.cast(), d_model)?,
        })
    }

    /// Every raw point becomes a token, encoded without pooling.
    pub fn from_points(
        cloud: &PointCloud,
        encoder: &PillarEncoder,
        params: &BackboneParams,
        d_model: usize,
    ) -> Result<Self> {
        let mut feats = Mat::<f64>::zeros(cloud.len(), encoder.d_out());
        for (r, p) in cloud.points().iter().enumerate() {
            encoder.encode_into(&p.feature, feats.row_mut(r));
        }
        Ok(Self {
            coords: cloud.coords(),
            features: params.project(&feats.cast(), d_model)?,
        })
    }
}

/// Equal-window blocks with bucketed padding: windows come from exact
/// window coordinates, each bucket is padded to its largest window and run
/// through the masked attention kernel; the FFN runs on real tokens only.
/// `bucket_edges = None` uses [`workload::default_bucket_edges`].
pub fn run_window_blocks(
    tokens: &Tokens,
    cfg: &FwaConfig,
    blocks: &[AttnParams<f32>],
    bucket_edges: Option<&[usize]>,
    times: &mut StageTimes,
) -> Result<Mat<f32>> {
    let (w_x, w_y) = cfg.window_meters();
    let pe_all = kernels::positional_embedding::<f32>(&tokens.coords, cfg.d_model)?;
    let mut features = tokens.features.clone();
    let d = cfg.d_model;

    for (i, block) in blocks.iter().enumerate() {
        let spec = WindowSpec::new(w_x, w_y, i % 2 == 1, Axis::X)?;

        let t = Instant::now();
        let partition = workload::partition_equal_window(&tokens.coords, &spec);
        times.sort += t.elapsed();

        let t = Instant::now();
        let sizes: Vec<usize> = partition.windows.iter().map(|w| w.members.len()).collect();
        let max_occ = sizes.iter().copied().max().unwrap_or(0);
        let edges = match bucket_edges {
            Some(e) => e.to_vec(),
            None => workload::default_bucket_edges(max_occ),
        };
        if edges.last().copied().unwrap_or(0) < max_occ {
            return Err(FwaError::Config(format!(
                "window occupancy {max_occ} exceeds the last bucket edge"
            )));
        }
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); edges.len()];
        for (w, &s) in sizes.iter().enumerate() {
            buckets[edges.partition_point(|&e| e < s)].push(w);
        }
        buckets.retain(|b| !b.is_empty());
        times.group += t.elapsed();

        let mut attended = Mat::<f32>::zeros(features.rows, d);
        for bucket in &buckets {
            let padded_len = bucket.iter().map(|&w| sizes[w]).max().unwrap();
            let t = Instant::now();
            let mut x = Mat::zeros(bucket.len() * padded_len, d);
            let mut pe = Mat::zeros(bucket.len() * padded_len, d);
            for (slot, &w) in bucket.iter().enumerate() {
                for (k, &m) in partition.windows[w].members.iter().enumerate() {
                    x.row_mut(slot * padded_len + k)
                        .copy_from_slice(features.row(m));
                    pe.row_mut(slot * padded_len + k)
                        .copy_from_slice(pe_all.row(m));
                }
            }
            let valid: Vec<usize> = bucket.iter().map(|&w| sizes[w]).collect();
            times.gather += t.elapsed();

            let t = Instant::now();
            let out = kernels::group_attention_padded(&x, &pe, block, &valid)?;
            times.attention += t.elapsed();

            let t = Instant::now();
            for (slot, &w) in bucket.iter().enumerate() {
                for (k, &m) in partition.windows[w].members.iter().enumerate() {
                    attended
                        .row_mut(m)
                        .copy_from_slice(out.row(slot * padded_len + k));
                }
            }
            times.scatter += t.elapsed();
        }

        let t = Instant::now();
        features = kernels::ffn_forward(&attended, block)?;
        times.ffn += t.elapsed();
    }
    Ok(features)
}

/// Times one backbone configuration on prepared tokens.
pub fn bench_tokens(
    tokens: &Tokens,
    cfg: &FwaConfig,
    params: &BackboneParams,
    mode: BenchMode,
    protocol: Protocol,
    scene: &str,
) -> Result<BenchResult> {
    cfg.validate()?;
    let mut run_cfg = cfg.clone();
    run_cfg.mode = match mode {
        BenchMode::Global => AttentionMode::Global,
        _ => AttentionMode::Group,
    };
    let m = measure(protocol, || {
        let mut times = StageTimes::default();
        match mode {
            BenchMode::Group | BenchMode::Global => {
                run_blocks(
                    tokens.features.clone(),
                    &tokens.coords,
                    &run_cfg,
                    &params.blocks,
                    0,
                    Some(&mut times),
                )?;
            }
            BenchMode::Window => {
                run_window_blocks(tokens, &run_cfg, &params.blocks, None, &mut times)?;
            }
        }
        Ok(times)
    })?;
    Ok(BenchResult {
        name: format!("{}-{}", mode.name(), tokens.len()),
        mode,
        scene: scene.to_string(),
        n_points: tokens.len(),
        config_digest: run_cfg.digest(),
        runs: protocol.runs,
        warmup: protocol.warmup,
        wall_time_ms: m.wall_time_ms,
        outliers_excluded: m.outliers_excluded,
        stage_ms: m.stage_ms,
    })
}
