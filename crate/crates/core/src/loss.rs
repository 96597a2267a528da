//! The continuous 3D loss: a pruned double sum of kernel-weighted feature
//! affinities between a predicted cloud and a LIDAR cloud, with gradients with
//! respect to predicted points and depths.
//!
//! Only the predicted cloud is differentiated. Summation is grouped by
//! predicted point and reduced in index order, so results do not depend on
//! the number of worker threads.

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{config_err, input_err, Error, Result};
use crate::features::{grid_stencils, stencil_normal, with_grid_normals, with_knn_normals};
use crate::geometry::{
    backproject_depth, crop_frustum, project_points, transform_cloud, CameraIntrinsics, DepthMap,
    HsvImage, PointCloud, Pose, Vec3,
};
use crate::kernels::{
    exp_kernel_grad, hsv_affinity, normal_affinity, normal_affinity_grad, KernelConfig, NormalGradMode,
    ScaleMode, COINCIDENT,
};

/// Added inside the logarithm of the log form.
pub const LOG_DELTA: f64 = 1e-12;

/// Upper bound on `n * m` accepted by [`brute_force`].
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;

/// Pairs `(pred index, lidar index)`, sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pairs: Vec<(usize, usize)>,
    groups: Vec<(usize, Range<usize>)>,
    prune_radius: Option<usize>,
}

impl PairSet {
    pub fn new(mut pairs: Vec<(usize, usize)>, n: usize, m: usize, prune_radius: Option<usize>) -> Result<Self> {
        if let Some(&(i, j)) = pairs.iter().find(|(i, j)| *i >= n || *j >= m) {
            return Err(input_err(format!("pair ({i}, {j}) out of range for clouds of {n} and {m} points")));
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self::from_sorted(pairs, prune_radius))
    }

    /// Every `(i, j)` combination.
    pub fn all(n: usize, m: usize) -> Self {
        let pairs = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).collect();
        Self::from_sorted(pairs, None)
    }

    fn from_sorted(pairs: Vec<(usize, usize)>, prune_radius: Option<usize>) -> Self {
        let mut groups: Vec<(usize, Range<usize>)> = Vec::new();
        for (idx, &(i, _)) in pairs.iter().enumerate() {
            match groups.last_mut() {
                Some((gi, range)) if *gi == i => range.end = idx + 1,
                _ => groups.push((i, idx..idx + 1)),
            }
        }
        Self {
            pairs,
            groups,
            prune_radius,
        }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `None` when the set was not produced by pruning.
    pub fn prune_radius(&self) -> Option<usize> {
        self.prune_radius
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, pair: (usize, usize)) -> bool {
        self.pairs.binary_search(&pair).is_ok()
    }
}

/// Keeps pairs whose pixel cells are within `radius` in Chebyshev distance.
///
/// LIDAR points are assigned to the cell containing their continuous projection;
/// points that do not project into the image never pair.
pub fn prune_pairs(
    pred: &PointCloud,
    lidar: &PointCloud,
    intrinsics: &CameraIntrinsics,
    radius: usize,
) -> Result<PairSet> {
    let pixels = pred
        .pixels
        .as_ref()
        .ok_or_else(|| config_err("pair pruning needs pixel provenance on the predicted cloud"))?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); w * h];
    for (j, proj) in project_points(lidar, intrinsics).iter().enumerate() {
        if let Some(cell) = proj.cell() {
            buckets[cell.row * w + cell.col].push(j);
        }
    }
    let per_point: Vec<Vec<(usize, usize)>> = pixels
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let rows = p.row.saturating_sub(radius)..(p.row.saturating_add(radius) + 1).min(h);
            let cols = p.col.saturating_sub(radius)..(p.col.saturating_add(radius) + 1).min(w);
            let mut js: Vec<usize> = rows
                .flat_map(|r| cols.clone().map(move |c| r * w + c))
                .flat_map(|cell| buckets[cell].iter().copied())
                .collect();
            js.sort_unstable();
            js.into_iter().map(|j| (i, j)).collect()
        })
        .collect();
    Ok(PairSet::from_sorted(per_point.concat(), Some(radius)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// `-Σ c k`.
    Linear,
    /// `-log(Σ c k + δ)`.
    Log,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Raw double sum, before any mean-mode normalization.
    pub inner_product: f64,
    /// Per predicted point; empty for value-only evaluations.
    pub grad_points: Vec<Vec3>,
    /// Per pixel of the depth map, row-major; empty unless evaluated from a depth map.
    pub grad_depth: Vec<f64>,
    pub pair_count: usize,
    pub s0_used: f64,
    pub form: LossForm,
}

fn check_features(pred: &PointCloud, lidar: &PointCloud, config: &KernelConfig) -> Result<()> {
    config.validate()?;
    pred.validate()?;
    lidar.validate()?;
    if config.use_hsv_kernel && (pred.hsv.is_none() || lidar.hsv.is_none()) {
        return Err(config_err("hsv kernel enabled but a cloud carries no hsv features"));
    }
    if config.use_normal_kernel && (pred.normals.is_none() || lidar.normals.is_none()) {
        return Err(config_err("normal kernel enabled but a cloud carries no normals"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
struct PointTerms {
    value: f64,
    grad_x: Vec3,
    grad_n: Vec3,
}

/// Contribution of the pairs of one predicted point to the inner product and its gradients.
fn point_terms(
    i: usize,
    js: &[(usize, usize)],
    pred: &PointCloud,
    lidar: &PointCloud,
    config: &KernelConfig,
    s0: f64,
    with_grad: bool,
) -> PointTerms {
    let x = pred.points[i];
    let hsv_i = pred.hsv.as_ref().map(|h| h[i]);
    let normal_i = pred.normals.as_ref().map(|n| n[i]);
    let mut out = PointTerms::default();
    for &(_, j) in js {
        let z = lidar.points[j];
        let cv = match (config.use_hsv_kernel, hsv_i, &lidar.hsv) {
            (true, Some(ci), Some(hz)) => hsv_affinity(&ci, &hz[j], config.sigma_v, config.s_v),
            _ => 1.0,
        };
        let (cn, dcn) = match (config.use_normal_kernel, normal_i, &lidar.normals) {
            (true, Some(ni), Some(nz)) => {
                let nj = nz[j];
                if ni.valid && nj.valid {
                    let c = normal_affinity(&ni.normal, ni.residual, &nj.normal, nj.residual, config.epsilon);
                    let g = normal_affinity_grad(&ni.normal, ni.residual, &nj.normal, nj.residual, config.epsilon);
                    (c, g)
                } else {
                    (0.0, Vec3::zeros())
                }
            }
            _ => (1.0, Vec3::zeros()),
        };
        let scale = config.scale(&x, &z, s0);
        let dist = (z - x).norm();
        let k = config.sigma_g * (-dist / scale).exp();
        let c = cv * cn;
        out.value += c * k;
        if with_grad {
            let mut dk = exp_kernel_grad(&x, &z, config.sigma_g, scale);
            if config.scale_mode == ScaleMode::DepthProportional && x.z > z.z && dist >= COINCIDENT {
                // s = s0 * x.z on this side of the max: dk/ds * ds/dx.
                dk.z += k * dist / (scale * scale) * s0;
            }
            out.grad_x += dk * c;
            out.grad_n += dcn * (cv * k);
        }
    }
    out
}

struct Accumulated {
    inner_product: f64,
    /// Gradients of the raw inner product.
    grad_x: Vec<Vec3>,
}

fn accumulate(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
    with_grad: bool,
) -> Result<Accumulated> {
    check_features(pred, lidar, config)?;
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(input_err(format!("s0 must be positive, got {s0}")));
    }
    if let Some(&(i, j)) = pairs.pairs.last() {
        if i >= pred.len() || pairs.pairs.iter().any(|&(_, j)| j >= lidar.len()) {
            return Err(input_err(format!(
                "pair set references ({i}, {j}) beyond clouds of {} and {} points",
                pred.len(),
                lidar.len()
            )));
        }
    }
    if with_grad && config.scale_mode == ScaleMode::DepthProportional {
        if let Some(p) = pred.points.iter().chain(&lidar.points).find(|p| !(p.z > 0.0)) {
            return Err(input_err(format!("depth-proportional scale needs positive depths, found {p:?}")));
        }
    }
    let full_normals = with_grad && config.use_normal_kernel && config.normal_grad_mode == NormalGradMode::Full;
    let stencils = if full_normals {
        Some(grid_stencils(pred, config.normal_window)?)
    } else {
        None
    };

    let terms: Vec<PointTerms> = pairs
        .groups
        .par_iter()
        .map(|(i, range)| point_terms(*i, &pairs.pairs[range.clone()], pred, lidar, config, s0, with_grad))
        .collect();
    let inner_product = terms.iter().map(|t| t.value).sum();
    if !with_grad {
        return Ok(Accumulated {
            inner_product,
            grad_x: Vec::new(),
        });
    }

    let mut grad_x = vec![Vec3::zeros(); pred.len()];
    for ((i, _), t) in pairs.groups.iter().zip(&terms) {
        grad_x[*i] += t.grad_x;
    }
    if let (Some(stencils), Some(normals)) = (stencils, pred.normals.as_ref()) {
        let points = &pred.points;
        for ((p, _), t) in pairs.groups.iter().zip(&terms) {
            let p = *p;
            let est = normals[p];
            let Some(stencil) = stencils[p].as_ref() else {
                continue;
            };
            if !est.valid || t.grad_n == Vec3::zeros() {
                continue;
            }
            let (h, v) = stencil.tangents(points, p);
            let m = h.cross(&v);
            let len = m.norm();
            let Some(unit) = stencil_normal(stencil, points, p) else {
                continue;
            };
            let sign = if unit.dot(&est.normal) < 0.0 { -1.0 } else { 1.0 };
            // n = sign * m / |m|
            let gm = (t.grad_n - unit * unit.dot(&t.grad_n)) * (sign / len);
            let gh = v.cross(&gm);
            let gv = gm.cross(&h);
            for &(q, w) in &stencil.horizontal {
                grad_x[q] += gh * w;
                grad_x[p] -= gh * w;
            }
            for &(q, w) in &stencil.vertical {
                grad_x[q] += gv * w;
                grad_x[p] -= gv * w;
            }
        }
    }
    Ok(Accumulated { inner_product, grad_x })
}

/// Raw double sum `Σ c_ij k(x_i, z_j)` over the pair set.
pub fn inner_product(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
) -> Result<f64> {
    Ok(accumulate(pred, lidar, pairs, config, s0, false)?.inner_product)
}

/// Loss value and (optionally) gradients with respect to predicted points.
pub fn evaluate(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
    form: LossForm,
    with_grad: bool,
) -> Result<LossReport> {
    let acc = accumulate(pred, lidar, pairs, config, s0, with_grad)?;
    let norm = if config.normalize && !pairs.is_empty() {
        pairs.len() as f64
    } else {
        1.0
    };
    let mass = acc.inner_product / norm;
    let (loss, grad_scale) = match form {
        LossForm::Linear => (-mass, -1.0 / norm),
        LossForm::Log => {
            if !(mass > 0.0) {
                return Err(Error::DegenerateScene {
                    pair_count: pairs.len(),
                    inner_product: acc.inner_product,
                });
            }
            (-(mass + LOG_DELTA).ln(), -1.0 / (norm * (mass + LOG_DELTA)))
        }
    };
    Ok(LossReport {
        loss,
        inner_product: acc.inner_product,
        grad_points: acc.grad_x.into_iter().map(|g| g * grad_scale).collect(),
        grad_depth: Vec::new(),
        pair_count: pairs.len(),
        s0_used: s0,
        form,
    })
}

pub fn c3d_loss(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
) -> Result<LossReport> {
    evaluate(pred, lidar, pairs, config, s0, LossForm::Linear, false)
}

pub fn c3d_log_loss(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
) -> Result<LossReport> {
    evaluate(pred, lidar, pairs, config, s0, LossForm::Log, false)
}

/// Gradient of the linear loss with respect to each predicted point.
pub fn grad_points(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
) -> Result<Vec<Vec3>> {
    Ok(evaluate(pred, lidar, pairs, config, s0, LossForm::Linear, true)?.grad_points)
}

/// Chains per-point gradients to the depth of their pixels: `dL/dd = dL/dx · ray`.
pub fn chain_to_depth(pred: &PointCloud, grad_points: &[Vec3], intrinsics: &CameraIntrinsics) -> Result<Vec<f64>> {
    let pixels = pred
        .pixels
        .as_ref()
        .ok_or_else(|| config_err("depth gradients need pixel provenance on the predicted cloud"))?;
    let mut out = vec![0.0; intrinsics.pixel_count()];
    for (p, g) in pixels.iter().zip(grad_points) {
        out[p.row * intrinsics.width + p.col] = g.dot(&intrinsics.pixel_ray(*p));
    }
    Ok(out)
}

/// Gradient of the linear loss with respect to each pixel's depth (row-major, zero off-cloud).
pub fn grad_depth(
    pred: &PointCloud,
    lidar: &PointCloud,
    pairs: &PairSet,
    config: &KernelConfig,
    s0: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    let g = grad_points(pred, lidar, pairs, config, s0)?;
    chain_to_depth(pred, &g, intrinsics)
}

/// Log loss of frame-i predictions against frame-j LIDAR moved into frame i by `pose`.
pub fn cross_frame_loss(
    pred: &PointCloud,
    lidar_j: &PointCloud,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    config: &KernelConfig,
    s0: f64,
) -> Result<LossReport> {
    let moved = crop_frustum(&transform_cloud(lidar_j, pose), intrinsics, f64::INFINITY)?;
    let pairs = prune_pairs(pred, &moved, intrinsics, config.prune_radius)?;
    c3d_log_loss(pred, &moved, &pairs, config, s0)
}

/// Unpruned double sum by naive accumulation over all `n * m` pairs.
///
/// Shares no code with the pruned evaluator beyond the point cloud types.
pub fn brute_force(pred: &PointCloud, lidar: &PointCloud, config: &KernelConfig, s0: f64) -> Result<f64> {
    let (n, m) = (pred.len(), lidar.len());
    if n.saturating_mul(m) > BRUTE_FORCE_LIMIT {
        return Err(input_err(format!(
            "brute force over {n} x {m} pairs exceeds the {BRUTE_FORCE_LIMIT} pair limit"
        )));
    }
    check_features(pred, lidar, config)?;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let x = &pred.points[i];
            let z = &lidar.points[j];
            let mut c = 1.0;
            if config.use_hsv_kernel {
                let (a, b) = (pred.hsv.as_ref().unwrap()[i], lidar.hsv.as_ref().unwrap()[j]);
                let mut dh = (a[0] - b[0]).abs() % 1.0;
                if dh > 0.5 {
                    dh = 1.0 - dh;
                }
                let d = (dh.powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                c *= config.sigma_v * (-d / config.s_v).exp();
            }
            if config.use_normal_kernel {
                let (a, b) = (pred.normals.as_ref().unwrap()[i], lidar.normals.as_ref().unwrap()[j]);
                c *= if a.valid && b.valid {
                    let dot = a.normal[0] * b.normal[0] + a.normal[1] * b.normal[1] + a.normal[2] * b.normal[2];
                    if dot > 0.0 {
                        dot / (a.residual + b.residual + config.epsilon)
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
            }
            let s = match config.scale_mode {
                ScaleMode::DepthProportional => s0 * if x[2] > z[2] { x[2] } else { z[2] },
                ScaleMode::Fixed => s0,
            };
            let r = ((x[0] - z[0]).powi(2) + (x[1] - z[1]).powi(2) + (x[2] - z[2]).powi(2)).sqrt();
            total += c * config.sigma_g * (-r / s).exp();
        }
    }
    Ok(total)
}

/// Frustum-crops a LIDAR cloud and attaches camera-facing PCA normals when the
/// normal kernel needs them and the cloud has none.
pub fn prepare_lidar(
    lidar: &PointCloud,
    intrinsics: &CameraIntrinsics,
    config: &KernelConfig,
    max_depth: f64,
) -> Result<PointCloud> {
    let cropped = crop_frustum(lidar, intrinsics, max_depth)?;
    if config.use_normal_kernel && cropped.normals.is_none() {
        if cropped.len() < 3 {
            return Err(Error::DegenerateScene {
                pair_count: 0,
                inner_product: 0.0,
            });
        }
        return with_knn_normals(cropped, config.lidar_knn, &Vec3::zeros());
    }
    Ok(cropped)
}

/// Loss of a depth map against a fixed LIDAR cloud.
///
/// The pair set is built once from the valid-pixel mask; every evaluation must
/// use a depth map with the same mask.
#[derive(Debug, Clone)]
pub struct DepthObjective<'a> {
    intrinsics: CameraIntrinsics,
    hsv: Option<&'a HsvImage>,
    lidar: &'a PointCloud,
    config: KernelConfig,
    form: LossForm,
    mask: Vec<bool>,
    pairs: PairSet,
}

impl<'a> DepthObjective<'a> {
    pub fn new(
        reference: &DepthMap,
        hsv: Option<&'a HsvImage>,
        lidar: &'a PointCloud,
        intrinsics: &CameraIntrinsics,
        config: &KernelConfig,
        form: LossForm,
    ) -> Result<Self> {
        intrinsics.validate()?;
        config.validate()?;
        let cloud = backproject_depth(reference, intrinsics, hsv)?;
        let pairs = prune_pairs(&cloud, lidar, intrinsics, config.prune_radius)?;
        Ok(Self {
            intrinsics: *intrinsics,
            hsv,
            lidar,
            config: config.clone(),
            form,
            mask: reference.valid_mask().to_vec(),
            pairs,
        })
    }

    pub fn pairs(&self) -> &PairSet {
        &self.pairs
    }

    pub fn config(&self) -> &KernelConfig {
        &self.config
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Back-projected cloud with the features the config asks for.
    pub fn pred_cloud(&self, depth: &DepthMap) -> Result<PointCloud> {
        if depth.valid_mask() != self.mask.as_slice() {
            return Err(input_err("depth map validity mask differs from the one the pairs were built on"));
        }
        let cloud = backproject_depth(depth, &self.intrinsics, self.hsv)?;
        if self.config.use_normal_kernel {
            with_grid_normals(cloud, self.config.normal_window)
        } else {
            Ok(cloud)
        }
    }

    pub fn evaluate(&self, depth: &DepthMap, s0: f64, with_grad: bool) -> Result<LossReport> {
        let pred = self.pred_cloud(depth)?;
        self.evaluate_cloud(&pred, s0, with_grad)
    }

    /// Evaluates a cloud previously built by [`Self::pred_cloud`], possibly with
    /// features replaced by the caller.
    pub fn evaluate_cloud(&self, pred: &PointCloud, s0: f64, with_grad: bool) -> Result<LossReport> {
        let mut report = evaluate(pred, self.lidar, &self.pairs, &self.config, s0, self.form, with_grad)?;
        if with_grad {
            report.grad_depth = chain_to_depth(pred, &report.grad_points, &self.intrinsics)?;
        }
        Ok(report)
    }
}
