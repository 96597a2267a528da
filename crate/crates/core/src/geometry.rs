//! Pinhole camera model, depth maps, point clouds and rigid transforms.
//!
//! Camera frame: +x right, +y down, +z forward. "Depth" always means the
//! z-coordinate of a point in this frame, never the ray length.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Result};
use crate::features::NormalEstimate;

pub type Vec3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fx.is_finite()) || !(self.fy > 0.0 && self.fy.is_finite()) {
            return Err(config_err(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(config_err(format!(
                "cx={} must lie strictly inside (0, width={})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(config_err(format!(
                "cy={} must lie strictly inside (0, height={})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Ray through continuous pixel coordinates, scaled so that its z-component is 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    #[inline]
    pub fn pixel_ray(&self, pixel: Pixel) -> Vec3 {
        self.ray(pixel.col as f64, pixel.row as f64)
    }

    #[inline]
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vec3,
}

impl Pose {
    const ORTHO_TOL: f64 = 1e-9;

    /// Builds a pose from a raw matrix, rejecting anything that is not a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho_err > Self::ORTHO_TOL || (det - 1.0).abs() > Self::ORTHO_TOL {
            return Err(input_err(format!(
                "rotation is not in SO(3): |RᵀR - I| = {ortho_err:e}, det = {det}"
            )));
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Rotation given as an axis-angle vector (angle = norm).
    pub fn from_axis_angle(axis_angle: Vec3, translation: Vec3) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle),
            translation,
        }
    }

    pub fn translation(translation: Vec3) -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    pub fn translation_vector(&self) -> &Vec3 {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

/// Row-major grid of metric depths with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depths: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if depths.len() != width * height || valid.len() != width * height {
            return Err(input_err(format!(
                "depth map {}x{} expects {} entries, got depths={} valid={}",
                width,
                height,
                width * height,
                depths.len(),
                valid.len()
            )));
        }
        for (idx, (&d, &ok)) in depths.iter().zip(&valid).enumerate() {
            if ok && !(d.is_finite() && d > 0.0) {
                return Err(input_err(format!(
                    "valid depth at index {idx} is {d}; valid depths must be finite and > 0"
                )));
            }
        }
        Ok(Self {
            width,
            height,
            depths,
            valid,
        })
    }

    /// Non-finite and non-positive entries become invalid (0 encodes "no depth").
    pub fn from_depths(width: usize, height: usize, depths: Vec<f64>) -> Result<Self> {
        let valid = depths.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depths = depths
            .into_iter()
            .map(|d| if d.is_finite() && d > 0.0 { d } else { 0.0 })
            .collect();
        Self::new(width, height, depths, valid)
    }

    pub fn filled(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_depths(width, height, vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let i = self.index(row, col);
        self.valid[i].then(|| self.depths[i])
    }

    /// Raw storage; entries under an invalid mask carry no meaning.
    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn set(&mut self, row: usize, col: usize, depth: f64) -> Result<()> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(input_err(format!("depth {depth} at ({row},{col}) is not positive")));
        }
        let i = self.index(row, col);
        self.depths[i] = depth;
        self.valid[i] = true;
        Ok(())
    }

    pub fn invalidate(&mut self, row: usize, col: usize) {
        let i = self.index(row, col);
        self.depths[i] = 0.0;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_pixels(&self) -> impl Iterator<Item = (Pixel, f64)> + '_ {
        (0..self.height).flat_map(move |row| {
            (0..self.width).filter_map(move |col| self.get(row, col).map(|d| (Pixel { row, col }, d)))
        })
    }

    /// Replaces the values of valid pixels, keeping the mask.
    pub(crate) fn with_valid_values(&self, values: &[f64]) -> DepthMap {
        let mut out = self.clone();
        for (i, v) in values.iter().enumerate() {
            if out.valid[i] {
                out.depths[i] = *v;
            }
        }
        out
    }
}

/// Per-pixel HSV image, row-major, components in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct HsvImage {
    width: usize,
    height: usize,
    data: Vec<Vec3>,
}

impl HsvImage {
    pub fn new(width: usize, height: usize, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != width * height {
            return Err(input_err(format!(
                "hsv image {}x{} expects {} pixels, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, hsv: Vec3) -> Self {
        Self {
            width,
            height,
            data: vec![hsv; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Vec3 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, hsv: Vec3) {
        self.data[row * self.width + col] = hsv;
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }
}

/// 3D points with optional parallel feature arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub hsv: Option<Vec<Vec3>>,
    pub normals: Option<Vec<NormalEstimate>>,
    pub pixels: Option<Vec<Pixel>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vec3>) -> Self {
        Self {
            points,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_hsv(mut self, hsv: Vec<Vec3>) -> Result<Self> {
        if hsv.len() != self.points.len() {
            return Err(input_err(format!(
                "hsv array has {} entries for {} points",
                hsv.len(),
                self.points.len()
            )));
        }
        self.hsv = Some(hsv);
        Ok(self)
    }

    pub fn with_normals(mut self, normals: Vec<NormalEstimate>) -> Result<Self> {
        if normals.len() != self.points.len() {
            return Err(input_err(format!(
                "normal array has {} entries for {} points",
                normals.len(),
                self.points.len()
            )));
        }
        self.normals = Some(normals);
        Ok(self)
    }

    /// Checks the parallel-array and feature-range invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        let lens = [
            ("hsv", self.hsv.as_ref().map(Vec::len)),
            ("normals", self.normals.as_ref().map(Vec::len)),
            ("pixels", self.pixels.as_ref().map(Vec::len)),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(input_err(format!("{name} has {len} entries for {n} points")));
                }
            }
        }
        if let Some(normals) = &self.normals {
            for (i, est) in normals.iter().enumerate() {
                if est.valid
                    && ((est.normal.norm() - 1.0).abs() > 1e-6 || !(0.0..=1.0).contains(&est.residual))
                {
                    return Err(input_err(format!(
                        "normal estimate {i} violates unit norm / residual range: {est:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Subset keeping all parallel arrays aligned.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            hsv: self.hsv.as_ref().map(|h| indices.iter().map(|&i| h[i]).collect()),
            normals: self
                .normals
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
            pixels: self
                .pixels
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }
}

/// Lifts every valid pixel to `d * ray(u, v)`, recording its pixel.
pub fn backproject_depth(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    hsv_image: Option<&HsvImage>,
) -> Result<PointCloud> {
    if depth.width() != intrinsics.width || depth.height() != intrinsics.height {
        return Err(config_err(format!(
            "depth map is {}x{} but calibration is {}x{}",
            depth.width(),
            depth.height(),
            intrinsics.width,
            intrinsics.height
        )));
    }
    if let Some(img) = hsv_image {
        if img.width() != depth.width() || img.height() != depth.height() {
            return Err(config_err(format!(
                "hsv image is {}x{} but depth map is {}x{}",
                img.width(),
                img.height(),
                depth.width(),
                depth.height()
            )));
        }
    }
    let n = depth.valid_count();
    let mut points = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    let mut hsv = hsv_image.map(|_| Vec::with_capacity(n));
    for (pixel, d) in depth.valid_pixels() {
        points.push(intrinsics.pixel_ray(pixel) * d);
        pixels.push(pixel);
        if let (Some(out), Some(img)) = (hsv.as_mut(), hsv_image) {
            out.push(img.get(pixel.row, pixel.col));
        }
    }
    Ok(PointCloud {
        points,
        hsv,
        normals: None,
        pixels: Some(pixels),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Column coordinate (continuous).
    pub u: f64,
    /// Row coordinate (continuous).
    pub v: f64,
    pub depth: f64,
    pub in_image: bool,
}

impl Projection {
    /// Integer pixel cell containing the projection, if inside the image.
    pub fn cell(&self) -> Option<Pixel> {
        self.in_image.then(|| Pixel {
            row: self.v.floor() as usize,
            col: self.u.floor() as usize,
        })
    }
}

pub fn project_points(cloud: &PointCloud, intrinsics: &CameraIntrinsics) -> Vec<Projection> {
    cloud
        .points
        .iter()
        .map(|p| {
            let (u, v) = intrinsics.project(p);
            let in_image = p.z > 0.0
                && u >= 0.0
                && u < intrinsics.width as f64
                && v >= 0.0
                && v < intrinsics.height as f64;
            Projection {
                u,
                v,
                depth: p.z,
                in_image,
            }
        })
        .collect()
}

pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(p)).collect(),
        hsv: cloud.hsv.clone(),
        normals: cloud.normals.as_ref().map(|ns| {
            ns.iter()
                .map(|n| NormalEstimate {
                    normal: pose.rotate(&n.normal),
                    ..*n
                })
                .collect()
        }),
        pixels: cloud.pixels.clone(),
    }
}

/// Keeps points in front of the camera, inside the image and no deeper than `max_depth`.
pub fn crop_frustum(cloud: &PointCloud, intrinsics: &CameraIntrinsics, max_depth: f64) -> Result<PointCloud> {
    if !(max_depth > 0.0) {
        return Err(config_err(format!("max_depth must be positive, got {max_depth}")));
    }
    let keep: Vec<usize> = project_points(cloud, intrinsics)
        .iter()
        .enumerate()
        .filter(|(_, p)| p.in_image && p.depth <= max_depth)
        .map(|(i, _)| i)
        .collect();
    Ok(cloud.select(&keep))
}
