//! Workload regularity analysis: equal-window partitions versus equal-size
//! groups.
//!
//! An equal-window partition groups points by identical window coordinates,
//! so group sizes follow the point density. Batched attention kernels then
//! pad every window in a bucket to the bucket's largest window. The reports
//! here count multiply-accumulates (MACs) for attention with and without
//! that padding:
//!
//! ```text
//! MACs(L, D) = 2·L²·D   (scores + weighted sum)
//!            + 4·L·D²   (Q, K, V and output projections)
//! ```
//!
//! LayerNorm, softmax and GELU are O(L·D) and not counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FwaError, Result};
use crate::flatten::{self, Axis, Grouping, WindowSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub coords: [i64; 2],
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualWindowPartition {
    pub spec: WindowSpec,
    /// Sorted by window coordinates `(x, y)`; members in input order.
    pub windows: Vec<Window>,
    /// Occupancy → number of windows with that occupancy.
    pub occupancy: BTreeMap<usize, usize>,
}

impl EqualWindowPartition {
    pub fn n_points(&self) -> usize {
        self.windows.iter().map(|w| w.members.len()).sum()
    }
}

pub fn partition_equal_window(coords: &[[f64; 2]], spec: &WindowSpec) -> EqualWindowPartition {
    let cell: Vec<[i64; 2]> = coords
        .iter()
        .map(|&c| [spec.quantize(c, Axis::X).0, spec.quantize(c, Axis::Y).0])
        .collect();
    let mut order: Vec<usize> = (0..coords.len()).collect();
    order.sort_by_key(|&i| cell[i]);

    let mut windows: Vec<Window> = Vec::new();
    for i in order {
        match windows.last_mut() {
            Some(w) if w.coords == cell[i] => w.members.push(i),
            _ => windows.push(Window {
                coords: cell[i],
                members: vec![i],
            }),
        }
    }
    let mut occupancy = BTreeMap::new();
    for w in &windows {
        *occupancy.entry(w.members.len()).or_insert(0) += 1;
    }
    EqualWindowPartition {
        spec: *spec,
        windows,
        occupancy,
    }
}

/// Closed-form attention MACs for a sequence of `len` tokens of width `d`.
pub fn attention_macs(len: usize, d: usize) -> u64 {
    let (l, d) = (len as u64, d as u64);
    2 * l * l * d + 4 * l * d * d
}

/// MACs tallied by walking the loop nest of a multi-head attention kernel
/// one query row at a time.
pub fn count_attention_macs(len: usize, d: usize, heads: usize) -> u64 {
    let dh = d / heads;
    let mut macs = 0u64;
    for _row in 0..len {
        // Packed QKV projection: 3·D outputs of D inputs each.
        macs += (3 * d * d) as u64;
        for _head in 0..heads {
            // q·k for every key, then the probability-weighted value sum.
            macs += (len * dh) as u64;
            macs += (len * dh) as u64;
        }
        // Output projection.
        macs += (d * d) as u64;
    }
    macs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    EqualWindow,
    EqualSize,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::EqualWindow => "equal-window",
            Strategy::EqualSize => "equal-size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub strategy: Strategy,
    pub n_points: usize,
    /// Attention units: windows for equal-window, groups for equal-size.
    pub n_windows: usize,
    pub max_occ: usize,
    pub min_nonzero_occ: usize,
    pub imbalance_ratio: f64,
    pub padding_factor: f64,
    pub attention_macs_actual: u64,
    pub attention_macs_padded: u64,
    pub group_count: Option<usize>,
    pub group_size: Option<usize>,
    /// Points left out of every attention unit (equal-size residual).
    pub dropped: usize,
    pub d_model: usize,
    pub bucket_edges: Vec<usize>,
    /// `(occupancy, window count)` pairs, ascending.
    pub occupancy_histogram: Vec<(usize, usize)>,
}

impl WorkloadReport {
    pub const CSV_HEADER: &'static str = "strategy,n_points,n_windows,max_occ,min_nonzero_occ,imbalance_ratio,padding_factor,attention_macs_actual,attention_macs_padded,group_count,group_size,dropped,d_model,bucket_edges";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<usize>| v.map(|v| v.to_string()).unwrap_or_default();
        let edges = self
            .bucket_edges
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let mut row = String::new();
        write!(
            row,
            "{},{},{},{},{},{:?},{:?},{},{},{},{},{},{},{}",
            self.strategy.name(),
            self.n_points,
            self.n_windows,
            self.max_occ,
            self.min_nonzero_occ,
            self.imbalance_ratio,
            self.padding_factor,
            self.attention_macs_actual,
            self.attention_macs_padded,
            opt(self.group_count),
            opt(self.group_size),
            self.dropped,
            self.d_model,
            edges
        )
        .unwrap();
        row
    }
}

/// Powers of two from 16 up to the first edge covering `max_occ`.
pub fn default_bucket_edges(max_occ: usize) -> Vec<usize> {
    let mut edges = vec![16];
    while *edges.last().unwrap() < max_occ {
        let next = edges.last().unwrap() * 2;
        edges.push(next);
    }
    edges
}

/// Buckets windows by occupancy (bucket `k` holds `edges[k-1] < occ <=
/// edges[k]`), pads each window to the largest occupancy in its bucket and
/// counts attention MACs at width `d`.
pub fn padding_cost(
    partition: &EqualWindowPartition,
    bucket_edges: &[usize],
    d: usize,
) -> Result<WorkloadReport> {
    if bucket_edges.is_empty() || bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(FwaError::Config(format!(
            "bucket edges must be non-empty and strictly increasing, got {bucket_edges:?}"
        )));
    }
    let max_occ = partition
        .windows
        .iter()
        .map(|w| w.members.len())
        .max()
        .unwrap_or(0);
    let last = *bucket_edges.last().unwrap();
    if max_occ > last {
        return Err(FwaError::Config(format!(
            "window occupancy {max_occ} exceeds the last bucket edge {last}"
        )));
    }
    let min_occ = partition
        .windows
        .iter()
        .map(|w| w.members.len())
        .min()
        .unwrap_or(0);

    let bucket_of = |occ: usize| bucket_edges.partition_point(|&e| e < occ);
    let mut bucket_max = vec![0usize; bucket_edges.len()];
    for w in &partition.windows {
        let b = bucket_of(w.members.len());
        bucket_max[b] = bucket_max[b].max(w.members.len());
    }
    let mut actual = 0u64;
    let mut padded = 0u64;
    for w in &partition.windows {
        actual += attention_macs(w.members.len(), d);
        padded += attention_macs(bucket_max[bucket_of(w.members.len())], d);
    }

    Ok(WorkloadReport {
        strategy: Strategy::EqualWindow,
        n_points: partition.n_points(),
        n_windows: partition.windows.len(),
        max_occ,
        min_nonzero_occ: min_occ,
        imbalance_ratio: if min_occ == 0 {
            1.0
        } else {
            max_occ as f64 / min_occ as f64
        },
        padding_factor: if actual == 0 {
            1.0
        } else {
            padded as f64 / actual as f64
        },
        attention_macs_actual: actual,
        attention_macs_padded: padded,
        group_count: None,
        group_size: None,
        dropped: 0,
        d_model: d,
        bucket_edges: bucket_edges.to_vec(),
        occupancy_histogram: partition.occupancy.iter().map(|(&k, &v)| (k, v)).collect(),
    })
}

/// Report for equal-size groups: every group has exactly `grouping.group_size`
/// members, so padded and actual MACs coincide.
pub fn equal_size_report(grouping: &Grouping, d: usize) -> WorkloadReport {
    let g = grouping.group_size;
    let macs = grouping.n_groups as u64 * attention_macs(g, d);
    let occ = if grouping.n_groups == 0 { 0 } else { g };
    WorkloadReport {
        strategy: Strategy::EqualSize,
        n_points: grouping.n_points(),
        n_windows: grouping.n_groups,
        max_occ: occ,
        min_nonzero_occ: occ,
        imbalance_ratio: 1.0,
        padding_factor: 1.0,
        attention_macs_actual: macs,
        attention_macs_padded: macs,
        group_count: Some(grouping.n_groups),
        group_size: Some(g),
        dropped: grouping.dropped.len(),
        d_model: d,
        bucket_edges: Vec::new(),
        occupancy_histogram: if grouping.n_groups == 0 {
            Vec::new()
        } else {
            vec![(g, grouping.n_groups)]
        },
    }
}

/// Both strategies on identical inputs. `bucket_edges` defaults to
/// [`default_bucket_edges`] of the largest window.
pub fn compare_strategies(
    coords: &[[f64; 2]],
    spec: &WindowSpec,
    group_size: usize,
    d: usize,
    bucket_edges: Option<&[usize]>,
) -> Result<(WorkloadReport, WorkloadReport)> {
    spec.validate()?;
    let partition = partition_equal_window(coords, spec);
    let edges = match bucket_edges {
        Some(e) => e.to_vec(),
        None => {
            let max_occ = partition
                .windows
                .iter()
                .map(|w| w.members.len())
                .max()
                .unwrap_or(0);
            default_bucket_edges(max_occ)
        }
    };
    let window = padding_cost(&partition, &edges, d)?;
    let plan = flatten::sort(coords, spec, None).plan;
    let grouping = flatten::group(&plan, group_size)?;
    Ok((window, equal_size_report(&grouping, d)))
}

// ---------------------------------------------------------------------------
// Spatial proximity

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupProximity {
    pub max_pairwise: f64,
    pub mean_to_centroid: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Self {
            min: v[0],
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: percentile(&v, 0.50),
            p95: percentile(&v, 0.95),
            max: v[v.len() - 1],
        }
    }
}

/// Linear interpolation between closest ranks of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProximityStats {
    pub per_group: Vec<GroupProximity>,
    pub max_pairwise: Summary,
    pub mean_to_centroid: Summary,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear points are dropped.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn diameter(points: &[[f64; 2]]) -> f64 {
    let hull = convex_hull(points);
    let mut best: f64 = 0.0;
    for (i, a) in hull.iter().enumerate() {
        for b in &hull[i + 1..] {
            best = best.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    best
}

/// Locality cost of equal-size grouping: per group, the largest distance
/// between two members and the mean distance to the group centroid.
pub fn spatial_proximity(grouping: &Grouping, coords: &[[f64; 2]]) -> ProximityStats {
    let per_group: Vec<GroupProximity> = grouping
        .groups()
        .map(|members| {
            let pts: Vec<[f64; 2]> = members.iter().map(|&i| coords[i]).collect();
            let n = pts.len() as f64;
            let (sx, sy) = pts
                .iter()
                .fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
            let (cx, cy) = (sx / n, sy / n);
            GroupProximity {
                max_pairwise: diameter(&pts),
                mean_to_centroid: pts
                    .iter()
                    .map(|p| (p[0] - cx).hypot(p[1] - cy))
                    .sum::<f64>()
                    / n,
            }
        })
        .collect();
    let maxes: Vec<f64> = per_group.iter().map(|g| g.max_pairwise).collect();
    let means: Vec<f64> = per_group.iter().map(|g| g.mean_to_centroid).collect();
    ProximityStats {
        max_pairwise: Summary::of(&maxes),
        mean_to_centroid: Summary::of(&means),
        per_group,
    }
}
