//! Direct depth refinement against a LIDAR cloud, and depth evaluation metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{MAX_DEPTH, MIN_DEPTH};
use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::{project_points, CameraIntrinsics, DepthMap, HsvImage, PointCloud};
use crate::kernels::{sample_s0, KernelConfig};
use crate::loss::{prepare_lidar, DepthObjective, LossForm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Initial step, in meters moved by the pixel with the largest gradient.
    pub step_size: f64,
    pub backtrack_factor: f64,
    /// Step growth after an accepted iteration.
    pub step_growth: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
    /// The kernel's `s0_law` is sampled once per run with `seed`.
    pub kernel: KernelConfig,
    pub anchor_weight: f64,
    pub anchor_delta: f64,
    pub max_depth: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_size: 0.05,
            backtrack_factor: 0.5,
            step_growth: 1.5,
            armijo: 1e-4,
            max_backtracks: 40,
            kernel: KernelConfig::default(),
            anchor_weight: 0.1,
            anchor_delta: 1.0,
            max_depth: MAX_DEPTH,
            seed: 0,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if self.iterations == 0 {
            return Err(config_err("iterations must be >= 1"));
        }
        if !(self.step_size > 0.0) {
            return Err(config_err(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(config_err(format!(
                "backtracking factor must lie in (0,1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.step_growth >= 1.0) {
            return Err(config_err(format!("step growth must be >= 1, got {}", self.step_growth)));
        }
        if !(self.armijo >= 0.0 && self.armijo < 1.0) {
            return Err(config_err(format!("armijo constant must lie in [0,1), got {}", self.armijo)));
        }
        if !(self.anchor_weight >= 0.0) {
            return Err(config_err(format!("anchor weight must be >= 0, got {}", self.anchor_weight)));
        }
        if !(self.anchor_delta > 0.0) {
            return Err(config_err(format!("anchor delta must be positive, got {}", self.anchor_delta)));
        }
        if !(self.max_depth > MIN_DEPTH) {
            return Err(config_err(format!("max depth must exceed {MIN_DEPTH}, got {}", self.max_depth)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Log loss plus anchor.
    pub objective: f64,
    pub log_loss: f64,
    pub anchor: f64,
    /// Step that produced this iterate; zero for the initial record.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub depth: DepthMap,
    /// Initial record followed by one record per accepted step.
    pub history: Vec<IterationRecord>,
    pub s0: f64,
}

fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

struct Anchor<'a> {
    initial: &'a [f64],
    mask: &'a [bool],
    weight: f64,
    delta: f64,
    count: f64,
}

impl Anchor<'_> {
    /// Mean Huber penalty over valid pixels and its per-pixel gradient.
    fn eval(&self, depths: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let scale = self.weight / self.count;
        let mut total = 0.0;
        let mut grad = grad;
        for i in (0..depths.len()).filter(|&i| self.mask[i]) {
            let (h, dh) = huber(depths[i] - self.initial[i], self.delta);
            total += h;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += scale * dh;
            }
        }
        scale * total
    }
}

/// Projected steepest descent on `-log(I + δ) + anchor` over the valid pixels
/// of `initial`, with Armijo backtracking. Rejected steps are not recorded, so
/// the objective history is non-increasing.
pub fn refine_depth(
    initial: &DepthMap,
    hsv: Option<&HsvImage>,
    lidar: &PointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    config.validate()?;
    if initial.valid_count() == 0 {
        return Err(input_err("initial depth map has no valid pixels"));
    }
    let lidar = prepare_lidar(lidar, intrinsics, &config.kernel, config.max_depth)?;
    let objective = DepthObjective::new(initial, hsv, &lidar, intrinsics, &config.kernel, LossForm::Log)?;
    if objective.pairs().is_empty() {
        return Err(Error::DegenerateScene {
            pair_count: 0,
            inner_product: 0.0,
        });
    }
    let s0 = sample_s0(&mut ChaCha8Rng::seed_from_u64(config.seed), &config.kernel.s0_law);
    let anchor = Anchor {
        initial: initial.depths(),
        mask: initial.valid_mask(),
        weight: config.anchor_weight,
        delta: config.anchor_delta,
        count: initial.valid_count() as f64,
    };
    let mask = initial.valid_mask();

    let mut depth = initial.clone();
    let mut report = objective.evaluate(&depth, s0, true)?;
    let anchor_value = anchor.eval(depth.depths(), None);
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: report.loss + anchor_value,
        log_loss: report.loss,
        anchor: anchor_value,
        step: 0.0,
    }];
    let mut step = config.step_size;

    for iteration in 1..=config.iterations {
        let current = history.last().expect("history starts non-empty").objective;
        let mut grad = report.grad_depth.clone();
        anchor.eval(depth.depths(), Some(&mut grad));
        for (g, valid) in grad.iter_mut().zip(mask) {
            if !valid {
                *g = 0.0;
            }
        }
        let gmax = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }

        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial: Vec<f64> = depth
                .depths()
                .iter()
                .zip(&grad)
                .map(|(d, g)| (d - step * g / gmax).clamp(MIN_DEPTH, config.max_depth))
                .collect();
            let decrease: f64 = depth.depths().iter().zip(&trial).zip(&grad).map(|((d, t), g)| g * (d - t)).sum();
            let trial_depth = depth.with_valid_values(&trial);
            let trial_report = match objective.evaluate(&trial_depth, s0, true) {
                Ok(r) => r,
                Err(Error::DegenerateScene { .. }) => {
                    step *= config.backtrack_factor;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let trial_anchor = anchor.eval(trial_depth.depths(), None);
            let value = trial_report.loss + trial_anchor;
            if value <= current - config.armijo * decrease && value <= current {
                accepted = Some((trial_depth, trial_report, trial_anchor));
                break;
            }
            step *= config.backtrack_factor;
        }
        let Some((next, next_report, next_anchor)) = accepted else {
            break;
        };
        history.push(IterationRecord {
            iteration,
            objective: next_report.loss + next_anchor,
            log_loss: next_report.loss,
            anchor: next_anchor,
            step,
        });
        depth = next;
        report = next_report;
        step *= config.step_growth;
    }
    Ok(RefineOutcome { depth, history, s0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3, self.count
        )
    }
}

/// Standard depth metrics over pixels valid in both maps with `gt <= cap`.
pub fn eval_metrics(pred: &DepthMap, gt: &DepthMap, cap: f64) -> Result<MetricsReport> {
    eval_metrics_masked(pred, gt, cap, None)
}

/// [`eval_metrics`] restricted to pixels where `mask` is true.
pub fn eval_metrics_masked(pred: &DepthMap, gt: &DepthMap, cap: f64, mask: Option<&[bool]>) -> Result<MetricsReport> {
    if pred.width() != gt.width() || pred.height() != gt.height() {
        return Err(input_err(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    if mask.is_some_and(|m| m.len() != gt.depths().len()) {
        return Err(input_err("metric mask length differs from the pixel count"));
    }
    let mut sums = [0.0; 7];
    let mut count = 0usize;
    for i in 0..gt.depths().len() {
        if !(pred.is_valid(i) && gt.is_valid(i)) || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let g = gt.depths()[i];
        if g > cap {
            continue;
        }
        let p = pred.depths()[i].min(cap);
        let diff = p - g;
        let ratio = (p / g).max(g / p);
        sums[0] += diff.abs() / g;
        sums[1] += diff * diff / g;
        sums[2] += diff * diff;
        sums[3] += (p.ln() - g.ln()).powi(2);
        for (k, threshold) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].into_iter().enumerate() {
            if ratio < threshold {
                sums[4 + k] += 1.0;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(input_err("no jointly valid pixels to evaluate"));
    }
    let n = count as f64;
    Ok(MetricsReport {
        abs_rel: sums[0] / n,
        sq_rel: sums[1] / n,
        rmse: (sums[2] / n).sqrt(),
        rmse_log: (sums[3] / n).sqrt(),
        delta1: sums[4] / n,
        delta2: sums[5] / n,
        delta3: sums[6] / n,
        count,
    })
}

/// Pixels whose cell receives at least one LIDAR point.
pub fn lidar_coverage(lidar: &PointCloud, intrinsics: &CameraIntrinsics) -> Vec<bool> {
    let mut covered = vec![false; intrinsics.pixel_count()];
    for cell in project_points(lidar, intrinsics).iter().filter_map(|p| p.cell()) {
        covered[cell.row * intrinsics.width + cell.col] = true;
    }
    covered
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// `"color"` for the HSV-only kernel, `"color+normal"` for the full kernel.
    pub variant: String,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub final_objective: f64,
}

/// Refines the same initialization with and without the normal kernel.
pub fn run_ablation(
    initial: &DepthMap,
    gt: &DepthMap,
    hsv: &HsvImage,
    lidar: &PointCloud,
    intrinsics: &CameraIntrinsics,
    config: &RefineConfig,
) -> Result<[AblationRow; 2]> {
    let before = eval_metrics(initial, gt, MAX_DEPTH)?;
    let run = |use_normal_kernel: bool, variant: &str| -> Result<AblationRow> {
        let mut cfg = config.clone();
        cfg.kernel.use_hsv_kernel = true;
        cfg.kernel.use_normal_kernel = use_normal_kernel;
        let out = refine_depth(initial, Some(hsv), lidar, intrinsics, &cfg)?;
        Ok(AblationRow {
            variant: variant.to_string(),
            before,
            after: eval_metrics(&out.depth, gt, MAX_DEPTH)?,
            final_objective: out.history.last().map_or(f64::NAN, |r| r.objective),
        })
    };
    Ok([run(false, "color")?, run(true, "color+normal")?])
}
