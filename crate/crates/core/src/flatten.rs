//! Window-based sorting and equal-size grouping.
//!
//! Each point gets a key of window coordinates `⌊c / w⌋` and local
//! coordinates `c − ⌊c / w⌋·w` on the (optionally half-window shifted)
//! position. Points are ordered by window along the major axis, then the
//! minor axis, then by local offset in the same axis priority, and finally
//! by original index. The sorted sequence is cut into groups of exactly `G`
//! points; the trailing non-full group is dropped.

use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FwaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    #[inline]
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }

    #[inline]
    pub fn other(self) -> Axis {
        match self {
            Axis::X => Axis::Y,
            Axis::Y => Axis::X,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub w_x: f64,
    pub w_y: f64,
    pub shift: bool,
    pub major_axis: Axis,
}

impl WindowSpec {
    pub fn new(w_x: f64, w_y: f64, shift: bool, major_axis: Axis) -> Result<Self> {
        let spec = Self {
            w_x,
            w_y,
            shift,
            major_axis,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_x > 0.0 && self.w_y > 0.0 && self.w_x.is_finite() && self.w_y.is_finite() {
            Ok(())
        } else {
            Err(FwaError::Config(format!(
                "window dimensions must be positive, got ({}, {})",
                self.w_x, self.w_y
            )))
        }
    }

    #[inline]
    pub fn width(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.w_x,
            Axis::Y => self.w_y,
        }
    }

    /// Position used for quantization: the input, translated by half a
    /// window on both axes when `shift` is set.
    #[inline]
    pub fn sort_position(&self, c: [f64; 2]) -> [f64; 2] {
        if self.shift {
            [c[0] + self.w_x / 2.0, c[1] + self.w_y / 2.0]
        } else {
            c
        }
    }

    /// `(window index, local offset)` on one axis.
    #[inline]
    pub fn quantize(&self, c: [f64; 2], axis: Axis) -> (i64, f64) {
        let w = self.width(axis);
        let v = self.sort_position(c)[axis.index()];
        let win = (v / w).floor();
        (win as i64, v - win * w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortKey {
    pub win_major: i64,
    pub win_minor: i64,
    pub loc_major: f64,
    pub loc_minor: f64,
    pub orig_index: usize,
}

pub fn sort_keys(coords: &[[f64; 2]], spec: &WindowSpec) -> Vec<SortKey> {
    let major = spec.major_axis;
    let minor = major.other();
    coords
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let (win_major, loc_major) = spec.quantize(c, major);
            let (win_minor, loc_minor) = spec.quantize(c, minor);
            SortKey {
                win_major,
                win_minor,
                loc_major,
                loc_minor,
                orig_index: i,
            }
        })
        .collect()
}

/// A cached window-sorted order of a fixed point set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SortPlan {
    /// `permutation[rank]` is the original index of the point at `rank`.
    pub permutation: Arc<[usize]>,
    pub spec: WindowSpec,
    pub n_points: usize,
}

impl SortPlan {
    pub fn is_valid_for(&self, spec: &WindowSpec, n_points: usize) -> bool {
        self.spec == *spec && self.n_points == n_points && self.permutation.len() == n_points
    }

    /// `rank[orig_index]`.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.n_points];
        for (rank, &i) in self.permutation.iter().enumerate() {
            ranks[i] = rank;
        }
        ranks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortOutcome {
    /// No cache was offered.
    Computed,
    /// The supplied plan matched and was returned unchanged.
    CacheHit,
    /// A plan was supplied but did not match; a fresh plan was computed.
    CacheMiss,
}

#[derive(Clone, Debug)]
pub struct Sorted {
    pub plan: SortPlan,
    pub outcome: SortOutcome,
    /// Number of sort keys evaluated (zero on a cache hit).
    pub keys_computed: usize,
}

/// Sorts `coords` in window order, or returns `cache` untouched when it was
/// built for the same spec and point count. The caller guarantees the
/// coordinates themselves have not changed since `cache` was computed.
pub fn sort(coords: &[[f64; 2]], spec: &WindowSpec, cache: Option<&SortPlan>) -> Sorted {
    let outcome = match cache {
        Some(plan) if plan.is_valid_for(spec, coords.len()) => {
            return Sorted {
                plan: plan.clone(),
                outcome: SortOutcome::CacheHit,
                keys_computed: 0,
            };
        }
        Some(_) => SortOutcome::CacheMiss,
        None => SortOutcome::Computed,
    };

    let keys = sort_keys(coords, spec);
    let mut order: Vec<usize> = (0..coords.len()).collect();
    // Stable sorts keep ascending original index for equal keys.
    order.sort_by_key(|&i| (keys[i].win_major, keys[i].win_minor));
    let mut start = 0;
    while start < order.len() {
        let win = (keys[order[start]].win_major, keys[order[start]].win_minor);
        let mut end = start + 1;
        while end < order.len() && (keys[order[end]].win_major, keys[order[end]].win_minor) == win {
            end += 1;
        }
        order[start..end].sort_by(|&a, &b| local_cmp(&keys[a], &keys[b]));
        start = end;
    }

    Sorted {
        plan: SortPlan {
            permutation: order.into(),
            spec: *spec,
            n_points: coords.len(),
        },
        outcome,
        keys_computed: keys.len(),
    }
}

#[inline]
fn local_cmp(a: &SortKey, b: &SortKey) -> Ordering {
    a.loc_major
        .partial_cmp(&b.loc_major)
        .unwrap_or(Ordering::Equal)
        .then_with(|| {
            a.loc_minor
                .partial_cmp(&b.loc_minor)
                .unwrap_or(Ordering::Equal)
        })
}

/// Partition of a sorted sequence into groups of exactly `group_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub group_size: usize,
    pub n_groups: usize,
    /// `n_groups × group_size`, row-major, original point indices.
    pub member_indices: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Set when `group_size` exceeds the point count, so nothing was grouped.
    pub starved: bool,
}

impl Grouping {
    pub fn group(&self, g: usize) -> &[usize] {
        &self.member_indices[g * self.group_size..(g + 1) * self.group_size]
    }

    pub fn groups(&self) -> impl Iterator<Item = &[usize]> {
        self.member_indices.chunks_exact(self.group_size)
    }

    pub fn n_points(&self) -> usize {
        self.member_indices.len() + self.dropped.len()
    }
}

pub fn group(plan: &SortPlan, group_size: usize) -> Result<Grouping> {
    if group_size == 0 {
        return Err(FwaError::Config("group size must be at least 1".into()));
    }
    let n = plan.permutation.len();
    let n_groups = n / group_size;
    let kept = n_groups * group_size;
    Ok(Grouping {
        group_size,
        n_groups,
        member_indices: plan.permutation[..kept].to_vec(),
        dropped: plan.permutation[kept..].to_vec(),
        starved: n_groups == 0 && n > 0,
    })
}

/// Per-block window configuration. Blocks cycle through
/// `(X, off), (X, on), (Y, off), (Y, on)`, so neighbouring blocks differ in
/// exactly one of axis or shift.
pub fn block_schedule(n_blocks: usize, w_x: f64, w_y: f64) -> Result<Vec<WindowSpec>> {
    if n_blocks == 0 {
        return Err(FwaError::Config("need at least one block".into()));
    }
    (0..n_blocks)
        .map(|i| {
            let axis = if i % 4 < 2 { Axis::X } else { Axis::Y };
            WindowSpec::new(w_x, w_y, i % 2 == 1, axis)
        })
        .collect()
}
