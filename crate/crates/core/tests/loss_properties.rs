use c3d::datagen::suite;
use c3d::geometry::{backproject_depth, transform_cloud};
use c3d::loss::{evaluate, inner_product, prepare_lidar, prune_pairs, LossForm};
use c3d::{KernelConfig, NormalEstimate, PairSet, PointCloud, Pose, S0Law, ScaleMode, Vec3};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive double sum written from the kernel definitions alone.
fn oracle(pred: &PointCloud, lidar: &PointCloud, cfg: &KernelConfig, s0: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..pred.len() {
        for j in 0..lidar.len() {
            let (x, z) = (pred.points[i], lidar.points[j]);
            let s = match cfg.scale_mode {
                ScaleMode::DepthProportional => s0 * x.z.max(z.z),
                ScaleMode::Fixed => s0,
            };
            let k = cfg.sigma_g * (-(x - z).norm() / s).exp();
            let (a, b) = (pred.hsv.as_ref().unwrap()[i], lidar.hsv.as_ref().unwrap()[j]);
            let hue = (a.x - b.x).abs().min(1.0 - (a.x - b.x).abs());
            let dv = Vec3::new(hue, a.y - b.y, a.z - b.z).norm();
            let cv = cfg.sigma_v * (-dv / cfg.s_v).exp();
            let (na, nb) = (pred.normals.as_ref().unwrap()[i], lidar.normals.as_ref().unwrap()[j]);
            let cn = na.normal.dot(&nb.normal).max(0.0) / (na.residual + nb.residual + cfg.epsilon);
            total += cv * cn * k;
        }
    }
    total
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points: Vec<Vec3> = (0..n)
        .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0)))
        .collect();
    let hsv = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
    let normals = (0..n)
        .map(|_| {
            let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -1.0);
            NormalEstimate::new(v.normalize(), rng.random_range(0.0..1.0))
        })
        .collect();
    PointCloud::from_points(points)
        .with_hsv(hsv)
        .unwrap()
        .with_normals(normals)
        .unwrap()
}

#[test]
fn all_pairs_match_test_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = KernelConfig::default();
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..120), rng.random_range(1..120));
        let (x, z) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
        let s0 = rng.random_range(0.01..0.5);
        let got = inner_product(&x, &z, &PairSet::all(n, m), &cfg, s0).unwrap();
        let want = oracle(&x, &z, &cfg, s0);
        assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} vs {want}");
    }
}

#[test]
fn pruning_error_shrinks_with_radius() {
    let scene = suite::noisy_plane_and_boxes(2).unwrap();
    let cfg = KernelConfig::default();
    let pred = c3d::features::with_grid_normals(
        backproject_depth(&scene.gt_depth, &scene.intrinsics, Some(&scene.hsv)).unwrap(),
        cfg.normal_window,
    )
    .unwrap();
    let lidar = prepare_lidar(&scene.lidar, &scene.intrinsics, &cfg, 80.0).unwrap();
    let full = inner_product(&pred, &lidar, &PairSet::all(pred.len(), lidar.len()), &cfg, 0.02).unwrap();
    let mut last = f64::INFINITY;
    for radius in [1, 2, 4, 8] {
        let pairs = prune_pairs(&pred, &lidar, &scene.intrinsics, radius).unwrap();
        let pruned = inner_product(&pred, &lidar, &pairs, &cfg, 0.02).unwrap();
        // Every term is non-negative, so pruning only removes mass.
        assert!(pruned <= full);
        let err = (full - pruned) / full;
        assert!(err <= last);
        last = err;
    }
    assert!(last < 1e-3, "radius 8 error {last}");
}

fn cfg_fixed() -> KernelConfig {
    KernelConfig {
        s0_law: S0Law::Fixed { s0: 0.3 },
        scale_mode: ScaleMode::Fixed,
        ..Default::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fixed_scale_loss_is_isometry_invariant(
        seed in any::<u64>(),
        aa in prop::array::uniform3(-3.0..3.0f64),
        t in prop::array::uniform3(-5.0..5.0f64),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, z) = (random_cloud(&mut rng, 30), random_cloud(&mut rng, 25));
        let pose = Pose::from_axis_angle(Vec3::from(aa), Vec3::from(t));
        let pairs = PairSet::all(30, 25);
        let cfg = cfg_fixed();
        let a = evaluate(&x, &z, &pairs, &cfg, 0.3, LossForm::Linear, false).unwrap().loss;
        let b = evaluate(&transform_cloud(&x, &pose), &transform_cloud(&z, &pose), &pairs, &cfg, 0.3, LossForm::Linear, false)
            .unwrap()
            .loss;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn inner_product_is_additive_over_pair_partitions(seed in any::<u64>(), split in 1usize..19) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, z) = (random_cloud(&mut rng, 20), random_cloud(&mut rng, 15));
        let all: Vec<(usize, usize)> = (0..20).flat_map(|i| (0..15).map(move |j| (i, j))).collect();
        let (lo, hi): (Vec<_>, Vec<_>) = all.iter().partition(|(i, _)| *i < split);
        let cfg = KernelConfig::default();
        let total = inner_product(&x, &z, &PairSet::new(all, 20, 15, None).unwrap(), &cfg, 0.05).unwrap();
        let a = inner_product(&x, &z, &PairSet::new(lo, 20, 15, None).unwrap(), &cfg, 0.05).unwrap();
        let b = inner_product(&x, &z, &PairSet::new(hi, 20, 15, None).unwrap(), &cfg, 0.05).unwrap();
        prop_assert!((total - (a + b)).abs() <= 1e-12 * total.abs().max(1e-300));
    }

    #[test]
    fn linear_loss_is_non_positive(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, z) = (random_cloud(&mut rng, 10), random_cloud(&mut rng, 10));
        let report = evaluate(&x, &z, &PairSet::all(10, 10), &KernelConfig::default(), 0.05, LossForm::Linear, true).unwrap();
        prop_assert!(report.loss <= 0.0);
        prop_assert_eq!(report.grad_points.len(), 10);
    }
}
