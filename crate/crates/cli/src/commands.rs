use std::io::Write;
use std::process::ExitCode;

use anyhow::{Context, Result};
use c3d::datagen::{corrupt_depth, render_depth, simulate_lidar, suite, Corruption, LidarSpec};
use c3d::flat::evaluate_depth;
use c3d::gradcheck::{run_grad_check, GradCheckConfig};
use c3d::kernels::sample_s0;
use c3d::loss::{brute_force as naive_sum, evaluate, prepare_lidar, DepthObjective, LossForm, PairSet};
use c3d::refine::{eval_metrics, refine_depth, run_ablation, MetricsReport, RefineConfig};
use c3d::{CameraIntrinsics, DepthMap, HsvImage, PointCloud, Pose};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::io::{self, SceneFile, DEPTH_SCALE};
use crate::{EvalArgs, GradCheckArgs, InputArgs, MetricsArgs, Preset, RefineArgs, SynthArgs};

#[derive(Serialize)]
struct Files {
    depth: String,
    hsv: String,
    cloud: String,
    calib: String,
    scene: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial: Option<String>,
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    width: usize,
    height: usize,
    valid_pixels: usize,
    /// Pixels deeper than the PNG range, stored as invalid.
    far_pixels: usize,
    lidar_points: usize,
    files: Files,
    lidar: LidarSpec,
    #[serde(skip_serializing_if = "Option::is_none")]
    corruption: Option<Corruption>,
}

fn preset_scene(preset: Preset, seed: u64) -> Result<(SceneFile, CameraIntrinsics, &'static str)> {
    let noise = Corruption {
        noise_std: 0.5,
        ..Default::default()
    };
    let (scene, holes, name) = match preset {
        Preset::PlaneAndBoxes => (suite::plane_and_boxes(seed), Vec::new(), "plane-and-boxes"),
        Preset::ReflectiveHole => {
            let s = suite::reflective_hole(seed, 1.0)?;
            (s.scene, s.holes, "reflective-hole")
        }
    };
    let file = SceneFile {
        scene,
        lidar: Some(suite::lidar_spec()),
        corruption: Some(Corruption { holes, ..noise }),
    };
    Ok((file, suite::camera(), name))
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let (file, intrinsics, preset) = match (args.preset, &args.scene, &args.calib) {
        (Some(p), _, _) => {
            let (f, k, name) = preset_scene(p, args.seed)?;
            (f, k, Some(name.to_string()))
        }
        (None, Some(scene), Some(calib)) => (io::read_scene(scene)?, io::read_calib(calib)?, None),
        _ => anyhow::bail!("synth needs --preset, or --scene with --calib"),
    };
    let spec = file.lidar.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let (mut depth, hsv) = render_depth(&file.scene, &intrinsics)?;
    let png_max = u16::MAX as f64 / DEPTH_SCALE;
    let mut far_pixels = 0;
    for row in 0..depth.height() {
        for col in 0..depth.width() {
            if depth.get(row, col).is_some_and(|d| d > png_max) {
                depth.invalidate(row, col);
                far_pixels += 1;
            }
        }
    }
    let lidar = simulate_lidar(&file.scene, &spec, &intrinsics, &Pose::identity(), &mut rng)?;

    io::ensure_dir(&args.out)?;
    let path = |name: &str| args.out.join(name);
    io::write_depth_png(&path("depth.png"), &depth)?;
    io::write_hsv_png(&path("hsv.png"), &hsv)?;
    io::write_ply(&path("lidar.ply"), &lidar)?;
    io::write_toml(&path("calib.toml"), &intrinsics)?;
    io::write_toml(&path("scene.toml"), &file)?;
    let initial = match &file.corruption {
        Some(c) => {
            let init = corrupt_depth(&depth, c, &mut rng)?;
            io::write_depth_png(&path("initial.png"), &init)?;
            Some("initial.png".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        seed: args.seed,
        preset,
        width: intrinsics.width,
        height: intrinsics.height,
        valid_pixels: depth.valid_count(),
        far_pixels,
        lidar_points: lidar.len(),
        files: Files {
            depth: "depth.png".into(),
            hsv: "hsv.png".into(),
            cloud: "lidar.ply".into(),
            calib: "calib.toml".into(),
            scene: "scene.toml".into(),
            initial,
        },
        lidar: spec,
        corruption: file.corruption.clone(),
    };
    io::write_toml(&path("manifest.toml"), &manifest)?;
    writeln!(out, "seed={}", args.seed)?;
    writeln!(out, "valid_pixels={}", manifest.valid_pixels)?;
    writeln!(out, "lidar_points={}", manifest.lidar_points)?;
    writeln!(out, "out={}", args.out.display())?;
    Ok(ExitCode::SUCCESS)
}

struct Inputs {
    depth: DepthMap,
    hsv: Option<HsvImage>,
    lidar: PointCloud,
    intrinsics: CameraIntrinsics,
}

fn read_inputs(args: &InputArgs) -> Result<Inputs> {
    for p in [&args.depth, &args.cloud, &args.calib].into_iter().chain(&args.hsv) {
        io::require_file(p)?;
    }
    let intrinsics = io::read_calib(&args.calib)?;
    let depth = io::read_depth_png(&args.depth)?;
    anyhow::ensure!(
        depth.width() == intrinsics.width && depth.height() == intrinsics.height,
        "depth map is {}x{} but the calibration is {}x{}",
        depth.width(),
        depth.height(),
        intrinsics.width,
        intrinsics.height
    );
    let hsv = args.hsv.as_deref().map(io::read_hsv_png).transpose()?;
    Ok(Inputs {
        depth,
        hsv,
        lidar: io::read_ply(&args.cloud)?,
        intrinsics,
    })
}

fn draw_s0(seed: u64, config: &c3d::KernelConfig) -> f64 {
    sample_s0(&mut ChaCha8Rng::seed_from_u64(seed), &config.s0_law)
}

#[derive(Serialize)]
struct GradRow {
    row: usize,
    col: usize,
    grad: f64,
}

pub fn eval_loss(args: &EvalArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = args.kernel.config()?;
    let inputs = read_inputs(&args.input)?;
    let s0 = draw_s0(args.seed, &config);
    let report = evaluate_depth(
        &inputs.depth,
        inputs.hsv.as_ref(),
        &inputs.lidar,
        &inputs.intrinsics,
        &config,
        s0,
        args.kernel.max_depth(),
    )?;
    let norm = if config.normalize && report.pair_count > 0 {
        report.pair_count as f64
    } else {
        1.0
    };
    writeln!(out, "loss={}", -report.inner_product / norm)?;
    writeln!(out, "log_loss={}", report.loss)?;
    writeln!(out, "inner_product={}", report.inner_product)?;
    writeln!(out, "pair_count={}", report.pair_count)?;
    writeln!(out, "s0={}", s0)?;
    writeln!(out, "seed={}", args.seed)?;
    if let Some(path) = &args.grad_csv {
        let w = inputs.intrinsics.width;
        let rows: Vec<GradRow> = report
            .grad_depth
            .iter()
            .enumerate()
            .filter(|(i, _)| inputs.depth.is_valid(*i))
            .map(|(i, g)| GradRow {
                row: i / w,
                col: i % w,
                grad: *g,
            })
            .collect();
        io::write_csv(path, &rows)?;
    }
    Ok(ExitCode::SUCCESS)
}

pub fn brute_force(args: &EvalArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = args.kernel.config()?;
    let inputs = read_inputs(&args.input)?;
    let s0 = draw_s0(args.seed, &config);
    let lidar = prepare_lidar(&inputs.lidar, &inputs.intrinsics, &config, args.kernel.max_depth())?;
    let objective = DepthObjective::new(
        &inputs.depth,
        inputs.hsv.as_ref(),
        &lidar,
        &inputs.intrinsics,
        &config,
        LossForm::Log,
    )?;
    let pred = objective.pred_cloud(&inputs.depth)?;
    let inner = naive_sum(&pred, &lidar, &config, s0)?;
    // The log form is taken through the library so degenerate sums are reported the same way.
    let all = PairSet::all(pred.len(), lidar.len());
    let log = evaluate(&pred, &lidar, &all, &config, s0, LossForm::Log, false)?;
    writeln!(out, "loss={}", -inner)?;
    writeln!(out, "log_loss={}", log.loss)?;
    writeln!(out, "inner_product={inner}")?;
    writeln!(out, "pair_count={}", pred.len() * lidar.len())?;
    writeln!(out, "s0={s0}")?;
    writeln!(out, "seed={}", args.seed)?;
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(args: &GradCheckArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let config = GradCheckConfig {
        scenes: args.scenes,
        size: args.size,
        lidar_points: args.lidar_points,
        kernel: args.kernel.config()?,
        seed: args.seed,
        ..Default::default()
    };
    let report = run_grad_check(&config)?;
    writeln!(out, "scene,s0,pairs,max_rel_error")?;
    for s in &report.scenes {
        writeln!(out, "{},{},{},{:e}", s.scene, s.s0, s.pair_count, s.max_rel_error)?;
    }
    let mode = format!("{:?}", report.mode).to_lowercase();
    writeln!(out, "mode={mode}")?;
    writeln!(out, "seed={}", args.seed)?;
    writeln!(out, "max_rel_error={:e}", report.max_rel_error)?;
    writeln!(out, "tolerance={:e}", report.tolerance)?;
    writeln!(out, "result={}", if report.passed() { "pass" } else { "fail" })?;
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Rows of `labels` followed by the metric columns.
fn write_metrics_csv(path: &std::path::Path, label_names: &[&str], rows: &[(Vec<String>, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let header: Vec<&str> = label_names
        .iter()
        .copied()
        .chain(MetricsReport::CSV_HEADER.split(','))
        .collect();
    w.write_record(&header)?;
    for (labels, m) in rows {
        let metrics = m.csv_row();
        w.write_record(labels.iter().map(String::as_str).chain(metrics.split(',')))?;
    }
    w.flush()?;
    Ok(())
}

pub fn refine(args: &RefineArgs, out: &mut dyn Write) -> Result<ExitCode> {
    let mut config = RefineConfig {
        kernel: args.kernel.config()?,
        max_depth: args.kernel.max_depth(),
        seed: args.seed,
        ..Default::default()
    };
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.step_size {
        config.step_size = v;
    }
    if let Some(v) = args.backtrack {
        config.backtrack_factor = v;
    }
    if let Some(v) = args.anchor_weight {
        config.anchor_weight = v;
    }
    if let Some(v) = args.anchor_delta {
        config.anchor_delta = v;
    }
    let inputs = read_inputs(&args.input)?;
    let gt = args.gt.as_deref().map(io::read_depth_png).transpose()?;

    let outcome = refine_depth(
        &inputs.depth,
        inputs.hsv.as_ref(),
        &inputs.lidar,
        &inputs.intrinsics,
        &config,
    )?;
    io::ensure_dir(&args.out)?;
    io::write_depth_png(&args.out.join("refined.png"), &outcome.depth)?;
    io::write_csv(&args.out.join("history.csv"), &outcome.history)?;
    writeln!(out, "iterations={}", outcome.history.len() - 1)?;
    writeln!(out, "s0={}", outcome.s0)?;
    writeln!(out, "seed={}", args.seed)?;
    let first = outcome.history.first().map_or(f64::NAN, |r| r.objective);
    let last = outcome.history.last().map_or(f64::NAN, |r| r.objective);
    writeln!(out, "objective_before={first}")?;
    writeln!(out, "objective_after={last}")?;

    if let Some(gt) = &gt {
        let before = eval_metrics(&inputs.depth, gt, 80.0).context("metrics before refinement")?;
        let after = eval_metrics(&outcome.depth, gt, 80.0).context("metrics after refinement")?;
        write_metrics_csv(
            &args.out.join("metrics.csv"),
            &["stage"],
            &[(vec!["before".into()], before), (vec!["after".into()], after)],
        )?;
        writeln!(out, "rmse_before={}", before.rmse)?;
        writeln!(out, "rmse_after={}", after.rmse)?;

        if args.ablation {
            let hsv = inputs
                .hsv
                .as_ref()
                .context("--ablation needs --hsv for the color kernel")?;
            let rows = run_ablation(&inputs.depth, gt, hsv, &inputs.lidar, &inputs.intrinsics, &config)?;
            let mut csv_rows = Vec::new();
            for r in &rows {
                let objective = r.final_objective.to_string();
                csv_rows.push((vec![r.variant.clone(), "before".into(), String::new()], r.before));
                csv_rows.push((vec![r.variant.clone(), "after".into(), objective], r.after));
                writeln!(out, "ablation_{}_rmse_after={}", r.variant, r.after.rmse)?;
            }
            write_metrics_csv(
                &args.out.join("ablation.csv"),
                &["variant", "stage", "final_objective"],
                &csv_rows,
            )?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn metrics(args: &MetricsArgs, out: &mut dyn Write) -> Result<ExitCode> {
    io::require_file(&args.pred)?;
    io::require_file(&args.gt)?;
    let pred = io::read_depth_png(&args.pred)?;
    let gt = io::read_depth_png(&args.gt)?;
    let m = eval_metrics(&pred, &gt, args.cap)?;
    writeln!(out, "{}", MetricsReport::CSV_HEADER)?;
    writeln!(out, "{}", m.csv_row())?;
    Ok(ExitCode::SUCCESS)
}
