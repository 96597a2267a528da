//! Loss and depth gradient over flat row-major arrays.
//!
//! Layout contract:
//! - `depth`: `H*W` values, row-major; non-positive or NaN entries are invalid pixels
//! - `hsv`: `H*W*3` values, pixel-major then channel, components in [0,1]
//! - `lidar`: `m*6` values, one `(x, y, z, h, s, v)` row per point, camera frame
//! - `intrinsics`: `(fx, fy, cx, cy, width, height)`
//!
//! The returned gradient is `H*W` row-major with zeros at invalid pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, HsvImage, PointCloud, Vec3};
use crate::kernels::{sample_s0, KernelConfig};
use crate::loss::{prepare_lidar, DepthObjective, LossForm, LossReport};

pub const LIDAR_COLUMNS: usize = 6;

#[derive(Debug, Clone)]
pub struct ArrayBundle<'a> {
    pub height: usize,
    pub width: usize,
    pub depth: &'a [f64],
    pub hsv: Option<&'a [f64]>,
    pub lidar: &'a [f64],
    pub intrinsics: [f64; 6],
    pub kernel: KernelConfig,
    /// Seeds the `s0` draw when the kernel's law is sampled.
    pub seed: u64,
    /// LIDAR points beyond this depth are cropped.
    pub max_depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatOutput {
    pub loss: f64,
    pub grad_depth: Vec<f64>,
    pub s0: f64,
    pub pair_count: usize,
}

fn shape_err(array: &'static str, expected: String, actual: usize) -> Error {
    Error::Shape {
        array,
        expected,
        actual: format!("{actual} values"),
    }
}

impl ArrayBundle<'_> {
    /// Checks every array length against the declared `H x W` and intrinsics.
    pub fn validate_shapes(&self) -> Result<()> {
        let (h, w) = (self.height, self.width);
        if self.depth.len() != h * w {
            return Err(shape_err("depth", format!("{h}x{w} = {} values", h * w), self.depth.len()));
        }
        if let Some(hsv) = self.hsv {
            if hsv.len() != h * w * 3 {
                return Err(shape_err("hsv", format!("{h}x{w}x3 = {} values", h * w * 3), hsv.len()));
            }
        }
        if self.lidar.len() % LIDAR_COLUMNS != 0 {
            return Err(shape_err(
                "lidar",
                format!("a multiple of {LIDAR_COLUMNS} values (m x {LIDAR_COLUMNS})"),
                self.lidar.len(),
            ));
        }
        let [_, _, _, _, iw, ih] = self.intrinsics;
        if iw != w as f64 || ih != h as f64 {
            return Err(Error::Shape {
                array: "intrinsics",
                expected: format!("width {w} and height {h}"),
                actual: format!("width {iw} and height {ih}"),
            });
        }
        Ok(())
    }
}

/// Log loss and depth gradient; shapes are validated before any computation.
pub fn eval_loss_and_grad(bundle: &ArrayBundle) -> Result<FlatOutput> {
    bundle.validate_shapes()?;
    let [fx, fy, cx, cy, _, _] = bundle.intrinsics;
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, bundle.width, bundle.height)?;
    let depth = DepthMap::from_depths(bundle.width, bundle.height, bundle.depth.to_vec())?;
    let hsv = bundle
        .hsv
        .map(|data| {
            let pixels = data.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
            HsvImage::new(bundle.width, bundle.height, pixels)
        })
        .transpose()?;
    let rows = bundle.lidar.chunks_exact(LIDAR_COLUMNS);
    let points = rows.clone().map(|r| Vec3::new(r[0], r[1], r[2])).collect();
    let colors = rows.map(|r| Vec3::new(r[3], r[4], r[5])).collect();
    let lidar = PointCloud::from_points(points).with_hsv(colors)?;
    let s0 = sample_s0(&mut ChaCha8Rng::seed_from_u64(bundle.seed), &bundle.kernel.s0_law);
    let report = evaluate_depth(&depth, hsv.as_ref(), &lidar, &intrinsics, &bundle.kernel, s0, bundle.max_depth)?;
    Ok(FlatOutput {
        loss: report.loss,
        grad_depth: report.grad_depth,
        s0,
        pair_count: report.pair_count,
    })
}

/// Crops and prepares `lidar`, prunes pairs and evaluates the log loss with
/// its depth gradient.
pub fn evaluate_depth(
    depth: &DepthMap,
    hsv: Option<&HsvImage>,
    lidar: &PointCloud,
    intrinsics: &CameraIntrinsics,
    config: &KernelConfig,
    s0: f64,
    max_depth: f64,
) -> Result<LossReport> {
    let lidar = prepare_lidar(lidar, intrinsics, config, max_depth)?;
    let objective = DepthObjective::new(depth, hsv, &lidar, intrinsics, config, LossForm::Log)?;
    objective.evaluate(depth, s0, true)
}
