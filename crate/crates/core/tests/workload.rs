use std::collections::BTreeMap;

use fwa_core::flatten::{self, Axis, WindowSpec};
use fwa_core::geometry::{generate_synthetic, CountDist, SceneSpec};
use fwa_core::oracle::{oracle_proximity, oracle_window_counts};
use fwa_core::workload::{
    self, attention_macs, padding_cost, partition_equal_window, spatial_proximity,
};
use proptest::prelude::*;

fn scene(seed: u64) -> Vec<[f64; 2]> {
    let spec = SceneSpec {
        extent: [40.0, 40.0],
        clusters: 12,
        cluster_points: CountDist::LogUniform { min: 10, max: 300 },
        cluster_spread: 1.0,
        background_points: 400,
        f_in: 1,
    };
    generate_synthetic(&spec, seed).unwrap().coords()
}

/// Padded MACs from raw window counts, bucketing by linear scan.
fn oracle_padding(counts: &[usize], edges: &[usize], d: usize) -> (u64, u64) {
    let bucket = |c: usize| edges.iter().position(|&e| c <= e).unwrap();
    let mut worst = vec![0; edges.len()];
    for &c in counts {
        worst[bucket(c)] = worst[bucket(c)].max(c);
    }
    let macs = |l: u64| 2 * l * l * d as u64 + 4 * l * (d * d) as u64;
    let actual = counts.iter().map(|&c| macs(c as u64)).sum();
    let padded = counts.iter().map(|&c| macs(worst[bucket(c)] as u64)).sum();
    (actual, padded)
}

#[test]
fn window_counts_match_hash_oracle() {
    for seed in 0..5 {
        let coords = scene(seed);
        for shift in [false, true] {
            let spec = WindowSpec::new(2.88, 2.88, shift, Axis::X).unwrap();
            let part = partition_equal_window(&coords, &spec);
            let oracle = oracle_window_counts(&coords, &spec);
            let mut hist = BTreeMap::new();
            for &c in oracle.values() {
                *hist.entry(c).or_insert(0) += 1;
            }
            assert_eq!(part.occupancy, hist);
            assert_eq!(part.windows.len(), oracle.len());
            for w in &part.windows {
                assert_eq!(oracle[&(w.coords[0], w.coords[1])], w.members.len());
            }
        }
    }
}

#[test]
fn padding_matches_oracle_arithmetic() {
    let coords = scene(42);
    let spec = WindowSpec::new(2.88, 2.88, false, Axis::X).unwrap();
    let part = partition_equal_window(&coords, &spec);
    let counts: Vec<usize> = oracle_window_counts(&coords, &spec).into_values().collect();
    let max = *counts.iter().max().unwrap();
    let edges = workload::default_bucket_edges(max);
    let report = padding_cost(&part, &edges, 64).unwrap();
    let (actual, padded) = oracle_padding(&counts, &edges, 64);
    assert_eq!(report.attention_macs_actual, actual);
    assert_eq!(report.attention_macs_padded, padded);
    assert_eq!(report.padding_factor, padded as f64 / actual as f64);
}

#[test]
fn constructed_eighty_to_one_scene() {
    let mut coords = vec![[5.5, 5.5]];
    coords.extend((0..80).map(|i| [0.1 + 0.01 * i as f64, 0.5]));
    let spec = WindowSpec::new(2.0, 2.0, false, Axis::X).unwrap();
    let report = padding_cost(
        &partition_equal_window(&coords, &spec),
        &[16, 32, 64, 128],
        32,
    )
    .unwrap();
    assert_eq!(report.max_occ, 80);
    assert_eq!(report.min_nonzero_occ, 1);
    assert_eq!(report.imbalance_ratio, 80.0);
    assert_eq!(report.padding_factor, 1.0);
}

#[test]
fn equal_size_side_has_no_padding() {
    let coords = scene(3);
    let spec = WindowSpec::new(2.88, 2.88, false, Axis::X).unwrap();
    let (win, size) = workload::compare_strategies(&coords, &spec, 69, 128, None).unwrap();
    assert_eq!(win.n_points, size.n_points);
    assert_eq!(size.padding_factor, 1.0);
    assert_eq!(size.dropped, coords.len() % 69);
    assert_eq!(
        size.attention_macs_actual,
        (coords.len() / 69) as u64 * attention_macs(69, 128)
    );
    assert!(win.padding_factor >= 1.0);
}

#[test]
fn proximity_matches_all_pairs() {
    let coords = scene(9);
    let spec = WindowSpec::new(2.88, 2.88, false, Axis::X).unwrap();
    let grouping = flatten::group(&flatten::sort(&coords, &spec, None).plan, 69).unwrap();
    let stats = spatial_proximity(&grouping, &coords);
    assert_eq!(stats.per_group.len(), grouping.n_groups);
    for (members, prox) in grouping.groups().zip(&stats.per_group) {
        let pts: Vec<[f64; 2]> = members.iter().map(|&i| coords[i]).collect();
        let (max_pair, mean) = oracle_proximity(&pts);
        assert!((prox.max_pairwise - max_pair).abs() <= 1e-12 * max_pair.max(1.0));
        assert!((prox.mean_to_centroid - mean).abs() <= 1e-12 * mean.max(1.0));
    }
    assert!(stats.max_pairwise.min <= stats.max_pairwise.p50);
    assert!(stats.max_pairwise.p95 <= stats.max_pairwise.max);
}

#[test]
fn group_diameter_is_bounded_by_its_windows() {
    let coords = scene(4);
    let w = 2.88;
    let spec = WindowSpec::new(w, w, false, Axis::X).unwrap();
    let grouping = flatten::group(&flatten::sort(&coords, &spec, None).plan, 69).unwrap();
    let stats = spatial_proximity(&grouping, &coords);
    for (members, prox) in grouping.groups().zip(&stats.per_group) {
        let cells: Vec<(i64, i64)> = members
            .iter()
            .map(|&i| {
                (
                    (coords[i][0] / w).floor() as i64,
                    (coords[i][1] / w).floor() as i64,
                )
            })
            .collect();
        let span = |f: fn(&(i64, i64)) -> i64| {
            let lo = cells.iter().map(f).min().unwrap();
            let hi = cells.iter().map(f).max().unwrap();
            (hi - lo + 1) as f64 * w
        };
        let bound = span(|c| c.0).hypot(span(|c| c.1));
        assert!(prox.max_pairwise <= bound + 1e-9);
    }
}

proptest! {
    #[test]
    fn merging_buckets_never_reduces_padding(
        counts in prop::collection::vec(1usize..200, 1..80),
        drop_at in 0usize..3,
    ) {
        let edges = vec![16, 32, 64, 128, 256];
        let coords: Vec<[f64; 2]> = counts
            .iter()
            .enumerate()
            .flat_map(|(w, &c)| (0..c).map(move |k| [w as f64 * 3.0 + 0.5 + k as f64 * 1e-3, 0.5]))
            .collect();
        let spec = WindowSpec::new(3.0, 3.0, false, Axis::X).unwrap();
        let part = partition_equal_window(&coords, &spec);
        let fine = padding_cost(&part, &edges, 16).unwrap();
        let mut coarse_edges = edges.clone();
        coarse_edges.remove(drop_at);
        let coarse = padding_cost(&part, &coarse_edges, 16).unwrap();
        prop_assert!(coarse.attention_macs_padded >= fine.attention_macs_padded);
        prop_assert!(fine.padding_factor >= 1.0);
    }
}
