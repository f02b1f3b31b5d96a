use fwa_core::fwa::{self, sort_cache_stats, AttentionMode, BackboneParams, FwaConfig};
use fwa_core::geometry::{self, PillarEncoder, PillarSet, Point, PointCloud};
use fwa_core::kernels::{self, AttnParams};
use fwa_core::tensor::{linear, Mat};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(n: usize, f_in: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::new(f_in);
    for _ in 0..n {
        cloud
            .push(Point {
                x: rng.gen_range(-4.0..4.0),
                y: rng.gen_range(-4.0..4.0),
                feature: (0..f_in).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .unwrap();
    }
    cloud
}

/// One point per cell of a `side × side` grid, so pillar count equals `side²`.
fn grid_pillars(side: usize, channels: usize, seed: u64) -> PillarSet {
    let res = 0.32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = PointCloud::new(2);
    for i in 0..side {
        for j in 0..side {
            cloud
                .push(Point {
                    x: (i as f64 + 0.5) * res,
                    y: (j as f64 + 0.5) * res,
                    feature: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                })
                .unwrap();
        }
    }
    geometry::pillarize(
        &cloud,
        res,
        &PillarEncoder::seeded(2, channels, seed).unwrap(),
    )
    .unwrap()
}

fn cfg(n_blocks: usize, g: usize) -> FwaConfig {
    FwaConfig {
        window: [3, 3],
        group_size: g,
        n_blocks,
        d_model: 16,
        n_heads: 4,
        d_ff: 32,
        pillar_channels: 8,
        ..FwaConfig::default()
    }
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pillarize_ignores_point_order(n in 1usize..300, seed in any::<u64>()) {
        let cloud = random_cloud(n, 3, seed);
        let mut points = cloud.points().to_vec();
        points.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let mut shuffled = PointCloud::new(3);
        for p in points {
            shuffled.push(p).unwrap();
        }
        let enc = PillarEncoder::seeded(3, 6, seed).unwrap();
        let a = geometry::pillarize(&cloud, 0.5, &enc).unwrap();
        let b = geometry::pillarize(&shuffled, 0.5, &enc).unwrap();
        prop_assert_eq!(&a.coords, &b.coords);
        prop_assert_eq!(&a.cells, &b.cells);
        prop_assert_eq!(&a.point_counts, &b.point_counts);
        prop_assert!(a.features.max_abs_diff(&b.features) <= 1e-12);
        prop_assert_eq!(a.point_counts.iter().sum::<usize>(), n);
    }

    #[test]
    fn permuting_tokens_in_a_group_permutes_outputs(seed in any::<u64>(), g in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = AttnParams::<f64>::seeded_full(8, 2, 16, seed).unwrap();
        let f = random_mat(g, 8, &mut rng);
        let pe = random_mat(g, 8, &mut rng);
        let mut perm: Vec<usize> = (0..g).collect();
        perm.shuffle(&mut rng);
        let out = kernels::fwa_block_infer(&f, &pe, &p, 1).unwrap();
        let out_perm = kernels::fwa_block_infer(&f.gather_rows(&perm), &pe.gather_rows(&perm), &p, 1).unwrap();
        prop_assert!(out.gather_rows(&perm).max_abs_diff(&out_perm) <= 1e-12);
    }
}

#[test]
fn packed_qkv_equals_three_projections() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for d in [4usize, 16, 64] {
        let p = AttnParams::<f32>::seeded_full(d, 4, 2 * d, rng.gen()).unwrap();
        let h = Mat::from_fn(37, d, |_, _| rng.gen_range(-2.0f32..2.0));
        let packed = linear(&h, &p.w_qkv, &p.b_qkv);
        for (part, off) in [0, d, 2 * d].into_iter().enumerate() {
            let w = Mat::from_vec(d, d, p.w_qkv.data[off * d..(off + d) * d].to_vec());
            let b = &p.b_qkv[off..off + d];
            let sep = linear(&h, &w, b);
            for r in 0..h.rows {
                for c in 0..d {
                    let diff = (packed.get(r, off + c) - sep.get(r, c)).abs();
                    assert!(diff <= 1e-6, "part {part} row {r} col {c}: {diff}");
                }
            }
        }
    }
}

#[test]
fn groups_do_not_see_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = AttnParams::<f64>::seeded_full(8, 2, 16, 3).unwrap();
    let f = random_mat(12, 8, &mut rng);
    let pe = random_mat(12, 8, &mut rng);
    let base = kernels::fwa_block_infer(&f, &pe, &p, 3).unwrap();
    let mut f2 = f.clone();
    for r in 4..8 {
        for c in 0..8 {
            f2.set(r, c, rng.gen_range(-5.0..5.0));
        }
    }
    let moved = kernels::fwa_block_infer(&f2, &pe, &p, 3).unwrap();
    for r in (0..4).chain(8..12) {
        assert_eq!(base.row(r), moved.row(r));
    }
    assert!((4..8).all(|r| base.row(r) != moved.row(r)));
}

#[test]
fn one_block_receptive_field_is_the_group() {
    let pillars = grid_pillars(30, 8, 2);
    let c = cfg(1, 69);
    let params = BackboneParams::seeded(&c, 8, 4).unwrap();
    let base = fwa::run_backbone(&pillars, &c, &params).unwrap();
    let probe = base.kept_indices[0];
    let mut bumped = pillars.clone();
    for v in bumped.features.row_mut(probe) {
        *v += 1.0;
    }
    let moved = fwa::run_backbone(&bumped, &c, &params).unwrap();
    let changed = (0..base.features.rows)
        .filter(|&r| base.features.row(r) != moved.features.row(r))
        .count();
    assert_eq!(changed, 69);
}

#[test]
fn chained_blocks_equal_one_run() {
    let pillars = grid_pillars(16, 8, 9);
    let c = cfg(2, 32);
    let params = BackboneParams::seeded(&c, 8, 1).unwrap();
    let whole = fwa::run_backbone(&pillars, &c, &params).unwrap();
    assert!(whole.dropped_indices.is_empty());

    let x = params.project(&pillars.features.cast(), c.d_model).unwrap();
    let first = fwa::run_blocks(x, &pillars.coords, &c, &params.blocks[..1], 0, None).unwrap();
    let second = fwa::run_blocks(
        first.features,
        &first.coords,
        &c,
        &params.blocks[1..],
        1,
        None,
    )
    .unwrap();
    assert_eq!(second.features, whole.features);
    assert_eq!(second.blocks[0].spec, whole.blocks[1].spec);
}

#[test]
fn backbone_is_deterministic() {
    let cloud = random_cloud(2000, 3, 8);
    let c = cfg(4, 20);
    let enc = PillarEncoder::seeded(3, 8, 8).unwrap();
    let pillars = geometry::pillarize(&cloud, c.resolution, &enc).unwrap();
    let params = BackboneParams::seeded(&c, 8, 8).unwrap();
    let a = fwa::run_backbone(&pillars, &c, &params).unwrap();
    let b = fwa::run_backbone(&pillars, &c, &params).unwrap();
    assert_eq!(a.summary(), b.summary());
    assert_eq!(a.features, b.features);
}

#[test]
fn cache_accounting_with_and_without_drops() {
    let c = cfg(8, 32);
    let clean = grid_pillars(16, 8, 1);
    let params = BackboneParams::seeded(&c, 8, 1).unwrap();
    let out = fwa::run_backbone(&clean, &c, &params).unwrap();
    let stats = sort_cache_stats(&out);
    assert_eq!((stats.computed, stats.cached), (4, 4));

    // 17² = 289 = 9·32 + 1: one pillar leaves after block 0, which stales
    // the block-0 plan for block 4; later blocks still hit.
    let ragged = grid_pillars(17, 8, 1);
    let out = fwa::run_backbone(&ragged, &c, &params).unwrap();
    assert_eq!(out.dropped_indices.len(), 1);
    let stats = sort_cache_stats(&out);
    assert_eq!((stats.computed, stats.cached), (5, 3));
}

#[test]
fn global_mode_is_one_group() {
    let pillars = grid_pillars(10, 8, 3);
    let c = FwaConfig {
        mode: AttentionMode::Global,
        ..cfg(2, 7)
    };
    let params = BackboneParams::seeded(&c, 8, 3).unwrap();
    let out = fwa::run_backbone(&pillars, &c, &params).unwrap();
    assert!(out
        .blocks
        .iter()
        .all(|b| b.n_groups == 1 && b.group_size == 100));
    assert!(out.dropped_indices.is_empty());
}
