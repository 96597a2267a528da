//! Scalar kernels of the loss and their analytic derivatives.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::features::NormalEstimate;
use crate::geometry::Vec3;

/// Distances below this are treated as coincident.
pub const COINCIDENT: f64 = 1e-12;

/// How the base scale `s0` is chosen for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum S0Law {
    Fixed { s0: f64 },
    /// `base + spread * |α|`, `α ~ N(0, 1)`.
    Sampled { base: f64, spread: f64 },
}

impl S0Law {
    pub const DEFAULT_SAMPLED: S0Law = S0Law::Sampled {
        base: 0.01,
        spread: 0.02,
    };

    /// Expected value of the law.
    pub fn mean(&self) -> f64 {
        match *self {
            S0Law::Fixed { s0 } => s0,
            S0Law::Sampled { base, spread } => base + spread * (2.0 / std::f64::consts::PI).sqrt(),
        }
    }
}

/// How the geometric kernel length scale is derived from `s0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// `s = s0 * max(depth_x, depth_z)`.
    DepthProportional,
    /// `s = s0` for every pair.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalGradMode {
    /// Predicted normals are constants of the evaluation.
    Detached,
    /// Gradients flow through the grid normal estimator into point positions.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelConfig {
    pub sigma_g: f64,
    pub s0_law: S0Law,
    pub scale_mode: ScaleMode,
    pub sigma_v: f64,
    pub s_v: f64,
    pub use_hsv_kernel: bool,
    pub use_normal_kernel: bool,
    pub epsilon: f64,
    /// Chebyshev radius in pixels for pair pruning.
    pub prune_radius: usize,
    pub normal_grad_mode: NormalGradMode,
    /// Half-width of the grid normal window on predicted depth.
    pub normal_window: usize,
    /// Neighborhood size for LIDAR normals.
    pub lidar_knn: usize,
    /// Divide the double sum by the pair count.
    pub normalize: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            sigma_g: 1.0,
            s0_law: S0Law::DEFAULT_SAMPLED,
            scale_mode: ScaleMode::DepthProportional,
            sigma_v: 1.0,
            s_v: 0.2,
            use_hsv_kernel: true,
            use_normal_kernel: true,
            epsilon: 0.05,
            prune_radius: 4,
            normal_grad_mode: NormalGradMode::Detached,
            normal_window: 2,
            lidar_knn: 8,
            normalize: false,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sigma_g", self.sigma_g),
            ("sigma_v", self.sigma_v),
            ("s_v", self.s_v),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        match self.s0_law {
            S0Law::Fixed { s0 } if !(s0 > 0.0 && s0.is_finite()) => {
                return Err(config_err(format!("fixed s0 must be positive, got {s0}")))
            }
            S0Law::Sampled { base, spread } if !(base > 0.0 && spread >= 0.0) => {
                return Err(config_err(format!(
                    "sampled s0 needs base > 0 and spread >= 0, got {base}, {spread}"
                )))
            }
            _ => {}
        }
        if self.normal_window == 0 {
            return Err(config_err("normal_window must be at least 1"));
        }
        if self.lidar_knn < 3 {
            return Err(config_err("lidar_knn must be at least 3"));
        }
        Ok(())
    }

    /// Geometric kernel length scale for a pair.
    #[inline]
    pub fn scale(&self, x: &Vec3, z: &Vec3, s0: f64) -> f64 {
        match self.scale_mode {
            ScaleMode::DepthProportional => s0 * x.z.max(z.z),
            ScaleMode::Fixed => s0,
        }
    }
}

/// `σ exp(-|x - z| / s)`.
#[inline]
pub fn exp_kernel(x: &Vec3, z: &Vec3, sigma: f64, s: f64) -> f64 {
    sigma * (-(x - z).norm() / s).exp()
}

/// `∂k/∂x = k (z - x) / (s |x - z|)`, zero at coincident points.
#[inline]
pub fn exp_kernel_grad(x: &Vec3, z: &Vec3, sigma: f64, s: f64) -> Vec3 {
    let diff = z - x;
    let dist = diff.norm();
    if dist < COINCIDENT {
        return Vec3::zeros();
    }
    let k = sigma * (-dist / s).exp();
    diff * (k / (s * dist))
}

/// `s0 * max(x.z, z.z)`: kernel support grows with the depth of the pair.
pub fn geometric_scale(x: &Vec3, z: &Vec3, s0: f64) -> Result<f64> {
    if !(s0 > 0.0) {
        return Err(input_err(format!("s0 must be positive, got {s0}")));
    }
    if !(x.z > 0.0 && z.z > 0.0) {
        return Err(input_err(format!(
            "geometric scale needs positive depths, got {} and {}",
            x.z, z.z
        )));
    }
    Ok(s0 * x.z.max(z.z))
}

pub fn sample_s0<R: Rng + ?Sized>(rng: &mut R, law: &S0Law) -> f64 {
    match *law {
        S0Law::Fixed { s0 } => s0,
        S0Law::Sampled { base, spread } => {
            let alpha: f64 = StandardNormal.sample(rng);
            base + spread * alpha.abs()
        }
    }
}

/// Euclidean HSV distance with hue treated as cyclic on [0,1).
#[inline]
pub fn hsv_distance(ci: &Vec3, cj: &Vec3) -> f64 {
    let dh = (ci.x - cj.x).abs().rem_euclid(1.0);
    let dh = dh.min(1.0 - dh);
    let ds = ci.y - cj.y;
    let dv = ci.z - cj.z;
    (dh * dh + ds * ds + dv * dv).sqrt()
}

#[inline]
pub fn hsv_affinity(ci: &Vec3, cj: &Vec3, sigma_v: f64, s_v: f64) -> f64 {
    sigma_v * (-hsv_distance(ci, cj) / s_v).exp()
}

/// `max(n_i·n_j, 0) / (r_i + r_j + ε)`.
#[inline]
pub fn normal_affinity(ni: &Vec3, ri: f64, nj: &Vec3, rj: f64, epsilon: f64) -> f64 {
    ni.dot(nj).max(0.0) / (ri + rj + epsilon)
}

/// `∂c/∂n_i = n_j / (r_i + r_j + ε)` outside the clamp, zero inside it.
#[inline]
pub fn normal_affinity_grad(ni: &Vec3, ri: f64, nj: &Vec3, rj: f64, epsilon: f64) -> Vec3 {
    if ni.dot(nj) > 0.0 {
        nj / (ri + rj + epsilon)
    } else {
        Vec3::zeros()
    }
}

/// Features of one point as seen by [`pair_weight`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PointFeatures {
    pub hsv: Option<Vec3>,
    pub normal: Option<NormalEstimate>,
}

/// Feature affinity `c^v · c^n` of a pair, honoring the config flags.
///
/// An invalid normal estimate on either side makes the normal factor zero.
pub fn feature_affinity(fi: &PointFeatures, fj: &PointFeatures, config: &KernelConfig) -> Result<f64> {
    let mut c = 1.0;
    if config.use_hsv_kernel {
        match (fi.hsv, fj.hsv) {
            (Some(a), Some(b)) => c *= hsv_affinity(&a, &b, config.sigma_v, config.s_v),
            _ => return Err(config_err("hsv kernel enabled but a cloud carries no hsv features")),
        }
    }
    if config.use_normal_kernel {
        match (fi.normal, fj.normal) {
            (Some(a), Some(b)) if a.valid && b.valid => {
                c *= normal_affinity(&a.normal, a.residual, &b.normal, b.residual, config.epsilon)
            }
            (Some(_), Some(_)) => c = 0.0,
            _ => return Err(config_err("normal kernel enabled but a cloud carries no normals")),
        }
    }
    Ok(c)
}

/// One summand `c_ij k(x_i, z_j)` of the inner product.
pub fn pair_weight(
    x: &Vec3,
    z: &Vec3,
    fi: &PointFeatures,
    fj: &PointFeatures,
    config: &KernelConfig,
    s0: f64,
) -> Result<f64> {
    let c = feature_affinity(fi, fj, config)?;
    Ok(c * exp_kernel(x, z, config.sigma_g, config.scale(x, z, s0)))
}
