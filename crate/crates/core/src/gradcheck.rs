//! Finite-difference verification of the analytic depth gradient on small
//! random scenes.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, HsvImage, PointCloud, Vec3};
use crate::kernels::{sample_s0, KernelConfig, NormalGradMode};
use crate::loss::{prepare_lidar, DepthObjective, LossForm};

/// Minimum depth gap kept between LIDAR points and pixels, so no central
/// difference straddles the kink of the depth-proportional scale.
const KINK_CLEARANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub scenes: usize,
    /// Image side length.
    pub size: usize,
    pub lidar_points: usize,
    pub fd_step: f64,
    /// Components below `floor * max|fd|` are compared in absolute terms.
    pub floor: f64,
    pub kernel: KernelConfig,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            scenes: 100,
            size: 8,
            lidar_points: 40,
            fd_step: 1e-6,
            floor: 1e-3,
            kernel: KernelConfig::default(),
            seed: 0,
        }
    }
}

impl GradCheckConfig {
    /// Tolerance on the maximum relative error for the configured mode.
    pub fn tolerance(&self) -> f64 {
        match self.kernel.normal_grad_mode {
            NormalGradMode::Detached => 1e-5,
            NormalGradMode::Full => 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneCheck {
    pub scene: usize,
    pub s0: f64,
    pub pair_count: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub mode: NormalGradMode,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub scenes: Vec<SceneCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone)]
pub struct RandomScene {
    pub intrinsics: CameraIntrinsics,
    pub depth: DepthMap,
    pub hsv: HsvImage,
    pub lidar: PointCloud,
}

/// A tilted, bumpy surface seen by a `size`x`size` camera and LIDAR points
/// scattered near it.
pub fn random_scene(rng: &mut ChaCha8Rng, size: usize, lidar_points: usize) -> Result<RandomScene> {
    let f = size as f64;
    let half = (f - 1.0) / 2.0;
    let intrinsics = CameraIntrinsics::new(f, f, half, half, size, size)?;
    let base = rng.random_range(2.0..4.0);
    let (tu, tv) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let surface = |u: f64, v: f64| base + tu * (u - half) + tv * (v - half);
    let depths: Vec<f64> = (0..size * size)
        .map(|i| surface((i % size) as f64, (i / size) as f64) + rng.random_range(-0.05..0.05))
        .collect();
    let colors = (0..size * size)
        .map(|_| Vec3::new(rng.random(), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)))
        .collect();
    let depth = DepthMap::from_depths(size, size, depths)?;
    let hsv = HsvImage::new(size, size, colors)?;

    let mut points = Vec::with_capacity(lidar_points);
    let mut lidar_hsv = Vec::with_capacity(lidar_points);
    while points.len() < lidar_points {
        let (u, v) = (rng.random_range(0.0..f - 1.0), rng.random_range(0.0..f - 1.0));
        let z = surface(u, v) + rng.random_range(-0.1..0.1);
        if depth.depths().iter().any(|d| (d - z).abs() < KINK_CLEARANCE) {
            continue;
        }
        points.push(intrinsics.ray(u, v) * z);
        lidar_hsv.push(Vec3::new(rng.random(), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0)));
    }
    let lidar = PointCloud::from_points(points).with_hsv(lidar_hsv)?;
    Ok(RandomScene {
        intrinsics,
        depth,
        hsv,
        lidar,
    })
}

fn max_rel_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    let scale = fd.iter().fold(0.0_f64, |m, g| m.max(g.abs())) * floor;
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Compares the analytic depth gradient of the log loss with central
/// differences. Detached mode freezes the normals at the base depth; full mode
/// re-estimates them at each perturbed depth with the residuals frozen.
pub fn check_scene(scene: &RandomScene, config: &GradCheckConfig, s0: f64) -> Result<(f64, usize)> {
    let lidar = prepare_lidar(&scene.lidar, &scene.intrinsics, &config.kernel, f64::INFINITY)?;
    let objective = DepthObjective::new(
        &scene.depth,
        Some(&scene.hsv),
        &lidar,
        &scene.intrinsics,
        &config.kernel,
        LossForm::Log,
    )?;
    let base = objective.pred_cloud(&scene.depth)?;
    let analytic = objective.evaluate_cloud(&base, s0, true)?;

    let loss_at = |depth: &DepthMap| -> Result<f64> {
        let mut cloud = objective.pred_cloud(depth)?;
        if let (Some(normals), Some(frozen)) = (cloud.normals.as_mut(), base.normals.as_ref()) {
            match config.kernel.normal_grad_mode {
                NormalGradMode::Detached => normals.clone_from(frozen),
                NormalGradMode::Full => {
                    for (n, f) in normals.iter_mut().zip(frozen) {
                        n.residual = f.residual;
                    }
                }
            }
        }
        Ok(objective.evaluate_cloud(&cloud, s0, false)?.loss)
    };

    let h = config.fd_step;
    let mut fd = vec![0.0; scene.depth.depths().len()];
    let mut analytic_valid = Vec::new();
    for (pixel, d) in scene.depth.valid_pixels() {
        let mut plus = scene.depth.clone();
        plus.set(pixel.row, pixel.col, d + h)?;
        let mut minus = scene.depth.clone();
        minus.set(pixel.row, pixel.col, d - h)?;
        let idx = scene.depth.index(pixel.row, pixel.col);
        fd[idx] = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * h);
        analytic_valid.push(idx);
    }
    let a: Vec<f64> = analytic_valid.iter().map(|&i| analytic.grad_depth[i]).collect();
    let f: Vec<f64> = analytic_valid.iter().map(|&i| fd[i]).collect();
    Ok((max_rel_error(&a, &f, config.floor), analytic.pair_count))
}

/// Runs [`check_scene`] over `config.scenes` seeded random scenes. Each scene
/// draws its own `s0` from the kernel's law.
pub fn run_grad_check(config: &GradCheckConfig) -> Result<GradCheckReport> {
    config.kernel.validate()?;
    if config.size < 3 {
        return Err(config_err(format!("grad-check scenes need size >= 3, got {}", config.size)));
    }
    if !(config.fd_step > 0.0) {
        return Err(config_err(format!("finite-difference step must be positive, got {}", config.fd_step)));
    }
    if config.lidar_points < 3 {
        return Err(config_err("grad-check scenes need at least 3 LIDAR points"));
    }
    let scenes = (0..config.scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
            let scene = random_scene(&mut rng, config.size, config.lidar_points)?;
            let s0 = sample_s0(&mut rng, &config.kernel.s0_law);
            let (max_rel_error, pair_count) = check_scene(&scene, config, s0)?;
            Ok(SceneCheck {
                scene: i,
                s0,
                pair_count,
                max_rel_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        mode: config.kernel.normal_grad_mode,
        tolerance: config.tolerance(),
        max_rel_error: scenes.iter().map(|s| s.max_rel_error).fold(0.0, f64::max),
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(max_rel_error(&[1.0, 0.0], &[1.0, 0.0], 1e-3), 0.0);
        assert!((max_rel_error(&[1.1], &[1.0], 1e-3) - 0.1 / 1.1).abs() < 1e-15);
        // A tiny component is measured against the floor, not itself.
        assert!(max_rel_error(&[1.0, 2e-9], &[1.0, 1e-9], 1e-3) < 1e-5);
    }

    #[test]
    fn detached_and_full_pass_on_a_few_scenes() {
        for mode in [NormalGradMode::Detached, NormalGradMode::Full] {
            let mut cfg = GradCheckConfig {
                scenes: 5,
                ..Default::default()
            };
            cfg.kernel.normal_grad_mode = mode;
            let report = run_grad_check(&cfg).unwrap();
            assert!(report.passed(), "{mode:?}: {}", report.max_rel_error);
            assert!(report.scenes.iter().all(|s| s.pair_count > 0));
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Freezing normals in the oracle while the analytic side chains through
        // them must show up as a mismatch.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = random_scene(&mut rng, 8, 40).unwrap();
        let mut analytic_cfg = GradCheckConfig::default();
        analytic_cfg.kernel.normal_grad_mode = NormalGradMode::Full;
        let lidar = prepare_lidar(&scene.lidar, &scene.intrinsics, &analytic_cfg.kernel, f64::INFINITY).unwrap();
        let obj = DepthObjective::new(
            &scene.depth,
            Some(&scene.hsv),
            &lidar,
            &scene.intrinsics,
            &analytic_cfg.kernel,
            LossForm::Log,
        )
        .unwrap();
        let full = obj.evaluate(&scene.depth, 0.03, true).unwrap().grad_depth;
        let mut detached_cfg = analytic_cfg.kernel.clone();
        detached_cfg.normal_grad_mode = NormalGradMode::Detached;
        let obj = DepthObjective::new(
            &scene.depth,
            Some(&scene.hsv),
            &lidar,
            &scene.intrinsics,
            &detached_cfg,
            LossForm::Log,
        )
        .unwrap();
        let detached = obj.evaluate(&scene.depth, 0.03, true).unwrap().grad_depth;
        assert!(max_rel_error(&full, &detached, 1e-3) > 1e-3);
    }
}
