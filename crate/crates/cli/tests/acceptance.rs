//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any fails.

mod common;

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use c3d::datagen::{corrupt_depth, suite, Corruption};
use c3d::features::{normal_residual, with_grid_normals};
use c3d::geometry::{backproject_depth, transform_cloud};
use c3d::kernels::{exp_kernel, hsv_affinity, normal_affinity, sample_s0};
use c3d::loss::{brute_force, evaluate, inner_product, prepare_lidar, prune_pairs, LossForm};
use c3d::refine::{eval_metrics, eval_metrics_masked, lidar_coverage, refine_depth, RefineConfig};
use c3d::{DepthMap, KernelConfig, NormalEstimate, PairSet, PointCloud, Pose, S0Law, ScaleMode, Vec3};
use common::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        if v.norm() > 1e-3 {
            return v.normalize();
        }
    }
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
    let points = (0..n)
        .map(|_| Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(1.0..6.0)))
        .collect();
    let hsv = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
    let normals = (0..n)
        .map(|_| NormalEstimate::new(unit(rng), rng.random_range(0.0..1.0)))
        .collect();
    PointCloud::from_points(points)
        .with_hsv(hsv)
        .unwrap()
        .with_normals(normals)
        .unwrap()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut detail = Vec::new();
    let mut passed = true;
    for (mode, tol) in [("detached", 1e-5), ("full", 1e-4)] {
        let out = c3d(&["grad-check", "--scenes", "100", "--size", "8", "--mode", mode]);
        let stdout = String::from_utf8_lossy(&out.stdout);
        let err = field(&stdout, "max_rel_error");
        passed &= out.status.success() && err < tol;
        detail.push(format!("{mode} max_rel_error={err:.3e} (< {tol:e})"));
    }
    let secs = start.elapsed().as_secs_f64();
    passed &= secs < 60.0;
    detail.push(format!("runtime={secs:.1}s (< 60s)"));
    outcome(passed, detail.join(", "))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = KernelConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..=200), rng.random_range(1..=200));
        let (x, z) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
        let s0 = sample_s0(&mut rng, &cfg.s0_law);
        let a = inner_product(&x, &z, &PairSet::all(n, m), &cfg, s0).unwrap();
        let b = brute_force(&x, &z, &cfg, s0).unwrap();
        worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
    }

    // Pruning at the default radius, measured at the smallest s0 the sampling
    // law produces; the law's mean is reported alongside.
    let law_mean = S0Law::DEFAULT_SAMPLED.mean();
    let mut prune_worst = 0.0f64;
    let mut prune_at_mean = 0.0f64;
    let scenes = (0..3)
        .map(|s| suite::noisy_plane_and_boxes(s).unwrap())
        .chain((0..2).map(|s| suite::reflective_hole(s, 1.0).unwrap()));
    for scene in scenes {
        let pred = with_grid_normals(
            backproject_depth(&scene.gt_depth, &scene.intrinsics, Some(&scene.hsv)).unwrap(),
            cfg.normal_window,
        )
        .unwrap();
        let lidar = prepare_lidar(&scene.lidar, &scene.intrinsics, &cfg, 80.0).unwrap();
        let all = PairSet::all(pred.len(), lidar.len());
        let pairs = prune_pairs(&pred, &lidar, &scene.intrinsics, cfg.prune_radius).unwrap();
        let rel = |s0: f64| {
            let full = inner_product(&pred, &lidar, &all, &cfg, s0).unwrap();
            let pruned = inner_product(&pred, &lidar, &pairs, &cfg, s0).unwrap();
            (full - pruned).abs() / full.abs()
        };
        prune_worst = prune_worst.max(rel(0.01));
        prune_at_mean = prune_at_mean.max(rel(law_mean));
    }
    outcome(
        worst <= 1e-10 && prune_worst < 1e-3,
        format!(
            "all-pairs vs brute force max rel={worst:.2e} (<= 1e-10), radius {} pruning rel err at s0=0.01: {prune_worst:.2e} (< 1e-3); at s0={law_mean:.4}: {prune_at_mean:.2e} (info)",
            cfg.prune_radius
        ),
    )
}

fn kernel_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let cfg = KernelConfig::default();
    let n = 10_000;
    let mut failures = Vec::new();

    let mut geo_ok = true;
    for _ in 0..n {
        let x = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.1..20.0));
        let z = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.1..20.0));
        let s0 = rng.random_range(0.001..1.0);
        let (sxz, szx) = (cfg.scale(&x, &z, s0), cfg.scale(&z, &x, s0));
        let (a, b) = (exp_kernel(&x, &z, cfg.sigma_g, sxz), exp_kernel(&z, &x, cfg.sigma_g, szx));
        geo_ok &= a == b && a <= cfg.sigma_g && a >= 0.0;
    }
    if !geo_ok {
        failures.push("geometric kernel");
    }

    let mut hsv_ok = true;
    for _ in 0..n {
        let a = Vec3::new(rng.random(), rng.random(), rng.random());
        let b = Vec3::new(rng.random(), rng.random(), rng.random());
        let (p, q) = (hsv_affinity(&a, &b, cfg.sigma_v, cfg.s_v), hsv_affinity(&b, &a, cfg.sigma_v, cfg.s_v));
        hsv_ok &= p == q && p <= cfg.sigma_v && p > 0.0;
    }
    if !hsv_ok {
        failures.push("hsv affinity");
    }

    let mut normal_ok = true;
    for _ in 0..n {
        let (ni, nj) = (unit(&mut rng), unit(&mut rng));
        let (ri, rj) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let p = normal_affinity(&ni, ri, &nj, rj, cfg.epsilon);
        let q = normal_affinity(&nj, rj, &ni, ri, cfg.epsilon);
        normal_ok &= p == q && p >= 0.0 && p <= 1.0 / cfg.epsilon;
    }
    if !normal_ok {
        failures.push("normal affinity");
    }

    let mut residual_ok = true;
    for _ in 0..n {
        let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..5.0));
        let normal = unit(&mut rng);
        let k = rng.random_range(1..12);
        let neighbors: Vec<Vec3> = (0..k)
            .map(|_| x + unit(&mut rng) * rng.random_range(0.01..2.0))
            .collect();
        let r = normal_residual(&x, &normal, &neighbors).unwrap();
        residual_ok &= (0.0..=1.0).contains(&r);
    }
    if !residual_ok {
        failures.push("planarity residual");
    }

    let draws = 1_000_000;
    let law = S0Law::DEFAULT_SAMPLED;
    let mean = (0..draws).map(|_| sample_s0(&mut rng, &law)).sum::<f64>() / draws as f64;
    let target = 0.01 + 0.02 * (2.0 / std::f64::consts::PI).sqrt();
    if (mean - target).abs() >= 2e-4 {
        failures.push("s0 mean");
    }
    outcome(
        failures.is_empty(),
        format!(
            "{n} inputs per property, s0 mean {mean:.6} vs {target:.6} (|diff| < 2e-4){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join(", "))
            }
        ),
    )
}

fn isometry_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let cfg = KernelConfig {
        s0_law: S0Law::Fixed { s0: 0.3 },
        scale_mode: ScaleMode::Fixed,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x, z) = (random_cloud(&mut rng, 40), random_cloud(&mut rng, 35));
        let pairs = PairSet::all(40, 35);
        let angle = unit(&mut rng) * rng.random_range(0.0..std::f64::consts::PI);
        let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        let pose = Pose::from_axis_angle(angle, t);
        let a = evaluate(&x, &z, &pairs, &cfg, 0.3, LossForm::Linear, false).unwrap().loss;
        let b = evaluate(&transform_cloud(&x, &pose), &transform_cloud(&z, &pose), &pairs, &cfg, 0.3, LossForm::Linear, false)
            .unwrap()
            .loss;
        worst = worst.max((a - b).abs() / a.abs());
    }
    outcome(worst <= 1e-9, format!("100 rigid transforms, max rel diff={worst:.2e} (<= 1e-9)"))
}

fn refine_config() -> RefineConfig {
    let mut cfg = RefineConfig {
        iterations: 300,
        ..Default::default()
    };
    cfg.kernel.s0_law = S0Law::Fixed { s0: 0.05 };
    cfg.kernel.normal_window = 4;
    cfg
}

fn noisy_init(gt: &DepthMap, corruption: Corruption, seed: u64) -> DepthMap {
    corrupt_depth(gt, &corruption, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn refinement_efficacy() -> Outcome {
    let cfg = refine_config();
    let mut passed = true;
    let mut detail = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..3 {
        let s = suite::noisy_plane_and_boxes(seed).unwrap();
        let init = noisy_init(&s.gt_depth, Corruption { noise_std: 0.5, ..Default::default() }, seed);
        let start = Instant::now();
        let out = refine_depth(&init, Some(&s.hsv), &s.lidar, &s.intrinsics, &cfg).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let before = eval_metrics(&init, &s.gt_depth, 80.0).unwrap().rmse;
        let after = eval_metrics(&out.depth, &s.gt_depth, 80.0).unwrap().rmse;
        passed &= after <= 0.7 * before;
        detail.push(format!("plane-and-boxes {seed}: {before:.3}->{after:.3} ({:.2}x)", after / before));
    }
    for seed in 0..3 {
        let s = suite::reflective_hole(seed, 1.0).unwrap();
        let corruption = Corruption {
            noise_std: 0.5,
            holes: s.holes.clone(),
            ..Default::default()
        };
        let init = noisy_init(&s.gt_depth, corruption, seed);
        let uncovered: Vec<bool> = lidar_coverage(&s.lidar, &s.intrinsics)
            .into_iter()
            .enumerate()
            .map(|(i, covered)| !covered && s.holes.iter().any(|h| h.contains(i / s.intrinsics.width, i % s.intrinsics.width)))
            .collect();
        let start = Instant::now();
        let out = refine_depth(&init, Some(&s.hsv), &s.lidar, &s.intrinsics, &cfg).unwrap();
        slowest = slowest.max(start.elapsed().as_secs_f64());
        let before = eval_metrics_masked(&init, &s.gt_depth, 80.0, Some(&uncovered)).unwrap();
        let after = eval_metrics_masked(&out.depth, &s.gt_depth, 80.0, Some(&uncovered)).unwrap();
        passed &= after.rmse < before.rmse;
        detail.push(format!(
            "reflective-hole {seed}: uncovered ({} px) {:.3}->{:.3}",
            before.count, before.rmse, after.rmse
        ));
    }
    passed &= slowest < 300.0;
    detail.push(format!("slowest {slowest:.1}s (< 300s)"));
    outcome(passed, detail.join("; "))
}

fn ablation_harness(dir: &Path) -> Outcome {
    let s = synth_preset(dir, "plane-and-boxes", 0);
    let out = dir.join("ablation");
    let mut args = vec!["refine".to_string()];
    args.extend(s.inputs("initial.png", "lidar.ply"));
    args.extend(
        [
            "--gt",
            &s.path("depth.png"),
            "--ablation",
            "--iterations",
            "40",
            "--seed",
            "0",
            "--out",
            out.to_str().unwrap(),
        ]
        .map(String::from),
    );
    let res = c3d(&strs(&args));
    if !res.status.success() {
        return outcome(false, String::from_utf8_lossy(&res.stderr).into_owned());
    }
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap_or_default();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let has = |variant: &str, stage: &str| rows.iter().any(|r| r[0] == variant && r[1] == stage);
    let paired = ["color", "color+normal"]
        .iter()
        .all(|v| has(v, "before") && has(v, "after"));
    let same_before = {
        let before: Vec<&[&str]> = rows.iter().filter(|r| r[1] == "before").map(|r| &r[3..]).collect();
        before.len() == 2 && before[0] == before[1]
    };
    outcome(
        paired && same_before && rows.len() == 4,
        format!("{} rows, both variants report before/after from one initialization", rows.len()),
    )
}

fn metrics_correctness() -> Outcome {
    let gt = DepthMap::from_depths(4, 1, vec![1.0, 2.0, 4.0, 8.0]).unwrap();
    let pred = DepthMap::from_depths(4, 1, vec![1.25, 2.5, 5.0, 10.0]).unwrap();
    let m = eval_metrics(&pred, &gt, 80.0).unwrap();
    outcome(
        m.abs_rel == 0.25 && m.delta1 == 0.0 && m.delta2 == 1.0,
        format!("abs_rel={} delta1={} delta2={}", m.abs_rel, m.delta1, m.delta2),
    )
}

/// Stdout plus every file under `dir`, in name order.
fn snapshot(args: &[String], dir: &Path) -> Vec<(String, Vec<u8>)> {
    let _ = fs::remove_dir_all(dir);
    fs::create_dir_all(dir).unwrap();
    let stdout = c3d_ok(&strs(args));
    let mut files = vec![("stdout".to_string(), stdout.into_bytes())];
    if dir.exists() {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            files.push((p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()));
        }
    }
    files
}

fn cli_determinism(dir: &Path) -> Outcome {
    let s = synth_preset(dir, "reflective-hole", 3);
    let small = single_pair_fixture(&dir.join("small"));
    let small = Synth { dir: small };
    let work = dir.join("work");
    let w = work.to_str().unwrap().to_string();
    let with = |head: &[&str], tail: Vec<String>| -> Vec<String> {
        head.iter().map(|s| s.to_string()).chain(tail).collect()
    };
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("synth", with(&["synth", "--preset", "reflective-hole", "--seed", "3", "--out", &w], vec![])),
        (
            "eval-loss",
            with(&["eval-loss", "--seed", "5", "--grad-csv", &format!("{w}/grad.csv")], s.inputs("initial.png", "lidar.ply")),
        ),
        ("brute-force", with(&["brute-force", "--seed", "5"], small.inputs("depth.png", "single.ply"))),
        ("grad-check", with(&["grad-check", "--seed", "5", "--scenes", "5"], vec![])),
        (
            "refine",
            with(
                &["refine", "--seed", "5", "--iterations", "10", "--ablation", "--gt", &s.path("depth.png"), "--out", &w],
                s.inputs("initial.png", "lidar.ply"),
            ),
        ),
        ("metrics", with(&["metrics", "--pred", &s.path("initial.png"), "--gt", &s.path("depth.png")], vec![])),
    ];
    let mut differing = Vec::new();
    for (name, args) in &commands {
        if snapshot(args, &work) != snapshot(args, &work) {
            differing.push(*name);
        }
    }
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} commands byte-identical across two runs", commands.len())
        } else {
            format!("differing output: {}", differing.join(", "))
        },
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("oracle equivalence", Box::new(oracle_equivalence)),
        ("kernel properties", Box::new(kernel_properties)),
        ("isometry invariance", Box::new(isometry_invariance)),
        ("refinement efficacy", Box::new(refinement_efficacy)),
        ("ablation harness", Box::new(|| ablation_harness(&dir.path().join("ablation")))),
        ("metrics correctness", Box::new(metrics_correctness)),
        ("cli determinism", Box::new(|| cli_determinism(&dir.path().join("determinism")))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let o = check();
        println!(
            "{} {name}: {} [{:.1}s]",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.passed);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
