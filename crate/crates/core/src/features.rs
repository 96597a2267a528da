//! Per-point features: HSV color, surface normals and the planarity residual.

use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{config_err, input_err, Result};
use crate::geometry::{PointCloud, Vec3};

/// Surface normal with its planarity residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEstimate {
    pub normal: Vec3,
    /// Mean |cos| between neighbor displacements and the normal, in [0,1].
    pub residual: f64,
    pub valid: bool,
}

impl NormalEstimate {
    pub fn new(normal: Vec3, residual: f64) -> Self {
        Self {
            normal,
            residual,
            valid: true,
        }
    }

    pub fn invalid() -> Self {
        Self {
            normal: Vec3::zeros(),
            residual: 1.0,
            valid: false,
        }
    }
}

/// Standard RGB to HSV with hue scaled to [0,1).
pub fn rgb_to_hsv(rgb: Vec3) -> Result<Vec3> {
    if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
        return Err(input_err(format!("rgb components must lie in [0,1], got {rgb:?}")));
    }
    let (r, g, b) = (rgb.x, rgb.y, rgb.z);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let hue = if chroma == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / chroma).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / chroma + 2.0) / 6.0
    } else {
        ((r - g) / chroma + 4.0) / 6.0
    };
    let hue = if hue >= 1.0 { 0.0 } else { hue };
    let sat = if max == 0.0 { 0.0 } else { chroma / max };
    Ok(Vec3::new(hue, sat, max))
}

/// Inverse of [`rgb_to_hsv`].
pub fn hsv_to_rgb(hsv: Vec3) -> Vec3 {
    let (h, s, v) = (hsv.x.rem_euclid(1.0) * 6.0, hsv.y, hsv.z);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    Vec3::new(r + m, g + m, b + m)
}

/// Mean of `|(x' - x)·n| / |x' - x|` over the neighborhood.
///
/// Neighbors coincident with `x` are skipped and do not count towards the mean.
pub fn normal_residual(x: &Vec3, normal: &Vec3, neighbors: &[Vec3]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for q in neighbors {
        let d = q - x;
        let len = d.norm();
        if len == 0.0 {
            continue;
        }
        sum += (d.dot(normal).abs() / len).min(1.0);
        count += 1;
    }
    if count == 0 {
        return Err(input_err("normal residual needs at least one neighbor distinct from the point"));
    }
    Ok((sum / count as f64).clamp(0.0, 1.0))
}

/// Flips normals so that they face `viewpoint`.
pub fn orient_toward_viewpoint(estimates: &mut [NormalEstimate], points: &[Vec3], viewpoint: &Vec3) {
    for (est, p) in estimates.iter_mut().zip(points) {
        if est.valid && (viewpoint - p).dot(&est.normal) < 0.0 {
            est.normal = -est.normal;
        }
    }
}

/// Linear stencil of the grid estimator for one point: the mean horizontal
/// displacement is `Σ h_i (x_i - x_p)`, the vertical one `Σ v_i (x_i - x_p)`.
#[derive(Debug, Clone)]
pub(crate) struct GridStencil {
    pub horizontal: Vec<(usize, f64)>,
    pub vertical: Vec<(usize, f64)>,
    pub neighbors: Vec<usize>,
}

impl GridStencil {
    pub fn tangents(&self, points: &[Vec3], p: usize) -> (Vec3, Vec3) {
        let x = points[p];
        let fold = |terms: &[(usize, f64)]| {
            terms
                .iter()
                .fold(Vec3::zeros(), |acc, &(q, w)| acc + (points[q] - x) * w)
        };
        (fold(&self.horizontal), fold(&self.vertical))
    }
}

/// Minimum count of valid window neighbors for a grid normal.
const MIN_GRID_NEIGHBORS: usize = 3;

pub(crate) fn grid_stencils(cloud: &PointCloud, window_radius: usize) -> Result<Vec<Option<GridStencil>>> {
    let pixels = cloud
        .pixels
        .as_ref()
        .ok_or_else(|| config_err("grid normals need pixel provenance on the cloud"))?;
    if window_radius == 0 {
        return Err(config_err("grid normal window radius must be at least 1"));
    }
    let width = pixels.iter().map(|p| p.col + 1).max().unwrap_or(0);
    let height = pixels.iter().map(|p| p.row + 1).max().unwrap_or(0);
    let mut lookup: Vec<Option<usize>> = vec![None; width * height];
    for (i, p) in pixels.iter().enumerate() {
        let slot = &mut lookup[p.row * width + p.col];
        if slot.is_some() {
            return Err(input_err(format!(
                "pixel ({}, {}) appears twice; grid normals need a single image grid",
                p.row, p.col
            )));
        }
        *slot = Some(i);
    }

    let r = window_radius as isize;
    let stencils = pixels
        .iter()
        .map(|p| {
            let mut horizontal = Vec::new();
            let mut vertical = Vec::new();
            let mut neighbors = Vec::new();
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (row, col) = (p.row as isize + dr, p.col as isize + dc);
                    if row < 0 || col < 0 || row >= height as isize || col >= width as isize {
                        continue;
                    }
                    let Some(q) = lookup[row as usize * width + col as usize] else {
                        continue;
                    };
                    neighbors.push(q);
                    if dc != 0 {
                        horizontal.push((q, 1.0 / dc as f64));
                    }
                    if dr != 0 {
                        vertical.push((q, 1.0 / dr as f64));
                    }
                }
            }
            if neighbors.len() < MIN_GRID_NEIGHBORS || horizontal.is_empty() || vertical.is_empty() {
                return None;
            }
            let nh = horizontal.len() as f64;
            let nv = vertical.len() as f64;
            horizontal.iter_mut().for_each(|t| t.1 /= nh);
            vertical.iter_mut().for_each(|t| t.1 /= nv);
            Some(GridStencil {
                horizontal,
                vertical,
                neighbors,
            })
        })
        .collect();
    Ok(stencils)
}

/// Unoriented normal from a stencil, or `None` when the tangents are parallel.
pub(crate) fn stencil_normal(stencil: &GridStencil, points: &[Vec3], p: usize) -> Option<Vec3> {
    let (h, v) = stencil.tangents(points, p);
    let m = h.cross(&v);
    let scale = h.norm() * v.norm();
    let len = m.norm();
    (scale > 0.0 && len > 1e-12 * scale).then(|| m / len)
}

/// Normals of a depth-image cloud from the cross product of the mean horizontal
/// and vertical displacements in a `(2r+1)²` window, oriented toward the camera.
pub fn estimate_normals_grid(cloud: &PointCloud, window_radius: usize) -> Result<Vec<NormalEstimate>> {
    let stencils = grid_stencils(cloud, window_radius)?;
    let points = &cloud.points;
    let mut out: Vec<NormalEstimate> = stencils
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let Some(st) = st else {
                return NormalEstimate::invalid();
            };
            let Some(normal) = stencil_normal(st, points, i) else {
                return NormalEstimate::invalid();
            };
            let neigh: Vec<Vec3> = st.neighbors.iter().map(|&q| points[q]).collect();
            match normal_residual(&points[i], &normal, &neigh) {
                Ok(residual) => NormalEstimate::new(normal, residual),
                Err(_) => NormalEstimate::invalid(),
            }
        })
        .collect();
    orient_toward_viewpoint(&mut out, points, &Vec3::zeros());
    Ok(out)
}

/// Nearest-neighbor index over a cloud, built once and queried read-only.
pub struct NeighborIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl NeighborIndex {
    pub fn build(points: &[Vec3]) -> Result<Self> {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&raw)
            .map_err(|e| input_err(format!("cannot build neighbor index: {e:?}")))?;
        Ok(Self {
            tree,
            len: points.len(),
        })
    }

    /// Indices of the `k` nearest points to `query`, nearest first.
    pub fn nearest(&self, query: &Vec3, k: usize) -> Vec<usize> {
        let Some(k) = NonZeroUsize::new(k.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .query(&[query.x, query.y, query.z])
            .nearest_n::<SquaredEuclidean<f64>>(k)
            .execute()
            .into_iter()
            .map(|r| r.item as usize)
            .collect()
    }
}

/// PCA normals over the `k` nearest neighbors (unoriented).
///
/// Clouds with fewer than `k + 1` points use every other point as the neighborhood.
pub fn estimate_normals_knn(cloud: &PointCloud, k: usize) -> Result<Vec<NormalEstimate>> {
    if k < 3 {
        return Err(config_err(format!("knn normals need k >= 3, got {k}")));
    }
    let n = cloud.len();
    if n < 3 {
        return Err(input_err(format!("knn normals need at least 3 points, cloud has {n}")));
    }
    let k = k.min(n - 1);
    let index = NeighborIndex::build(&cloud.points)?;
    let points = &cloud.points;
    Ok((0..n)
        .map(|i| {
            let mut hood = index.nearest(&points[i], k + 1);
            match hood.iter().position(|&q| q == i) {
                Some(pos) => {
                    hood.remove(pos);
                }
                None => {
                    hood.pop();
                }
            }
            pca_normal(&points[i], &hood.iter().map(|&q| points[q]).collect::<Vec<_>>())
        })
        .collect())
}

fn pca_normal(x: &Vec3, neighbors: &[Vec3]) -> NormalEstimate {
    let count = (neighbors.len() + 1) as f64;
    let centroid = neighbors.iter().fold(*x, |acc, q| acc + q) / count;
    let cov = neighbors
        .iter()
        .chain(std::iter::once(x))
        .fold(Matrix3::zeros(), |acc, q| {
            let d = q - centroid;
            acc + d * d.transpose()
        })
        / count;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 0.0) || middle <= 1e-12 * largest {
        return NormalEstimate::invalid();
    }
    let normal = eig.eigenvectors.column(order[0]).normalize();
    match normal_residual(x, &normal, neighbors) {
        Ok(residual) => NormalEstimate::new(normal, residual),
        Err(_) => NormalEstimate::invalid(),
    }
}

/// Attaches grid normals (camera-facing) to a back-projected cloud.
pub fn with_grid_normals(mut cloud: PointCloud, window_radius: usize) -> Result<PointCloud> {
    cloud.normals = Some(estimate_normals_grid(&cloud, window_radius)?);
    Ok(cloud)
}

/// Attaches PCA normals oriented toward `viewpoint`.
pub fn with_knn_normals(mut cloud: PointCloud, k: usize, viewpoint: &Vec3) -> Result<PointCloud> {
    let mut normals = estimate_normals_knn(&cloud, k)?;
    orient_toward_viewpoint(&mut normals, &cloud.points, viewpoint);
    cloud.normals = Some(normals);
    Ok(cloud)
}
