//! Synthetic scenes with exact dense depth, simulated scan-line LIDAR and
//! depth corruption.

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::geometry::{CameraIntrinsics, DepthMap, HsvImage, PointCloud, Pose, Vec3};

/// Smallest ray parameter accepted as a hit.
const HIT_EPS: f64 = 1e-9;

/// Depth range enforced on corrupted and refined depth maps.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Disc of radius `extent` around `point`.
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
        extent: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Oriented box; `rotation` is an axis-angle vector.
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default)]
        rotation: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrimitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub hsv: [f64; 3],
    #[serde(default)]
    pub reflective: bool,
}

impl ScenePrimitive {
    pub fn validate(&self) -> Result<()> {
        match &self.shape {
            Shape::Plane { normal, extent, .. } => {
                let n = Vec3::from(*normal).norm();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(input_err(format!("plane normal must be unit length, has norm {n}")));
                }
                if !(*extent > 0.0) {
                    return Err(input_err(format!("plane extent must be positive, got {extent}")));
                }
            }
            Shape::Sphere { radius, .. } if !(*radius > 0.0) => {
                return Err(input_err(format!("sphere radius must be positive, got {radius}")));
            }
            Shape::Box { half_extents, .. } if half_extents.iter().any(|h| !(*h > 0.0)) => {
                return Err(input_err(format!("box half extents must be positive, got {half_extents:?}")));
            }
            _ => {}
        }
        if self.hsv.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(input_err(format!("hsv components must lie in [0,1], got {:?}", self.hsv)));
        }
        Ok(())
    }

    /// Smallest ray parameter `t > 0` with `origin + t * dir` on the surface.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        match &self.shape {
            Shape::Plane { point, normal, extent } => {
                let (p0, n) = (Vec3::from(*point), Vec3::from(*normal));
                let denom = n.dot(dir);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = n.dot(&(p0 - origin)) / denom;
                (t > HIT_EPS && (origin + dir * t - p0).norm() <= *extent).then_some(t)
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - Vec3::from(*center);
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > HIT_EPS)
            }
            Shape::Box {
                center,
                half_extents,
                rotation,
            } => {
                let pose = Pose::from_axis_angle(Vec3::from(*rotation), Vec3::from(*center));
                let inv = pose.inverse();
                let o = inv.transform_point(origin);
                let d = inv.rotate(dir);
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for a in 0..3 {
                    let h = half_extents[a];
                    if d[a].abs() < 1e-15 {
                        if o[a].abs() > h {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-h - o[a]) / d[a];
                    let t2 = (h - o[a]) / d[a];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far {
                    return None;
                }
                [t_near, t_far].into_iter().find(|t| *t > HIT_EPS)
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    #[serde(rename = "primitive", default)]
    pub primitives: Vec<ScenePrimitive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub primitive: usize,
}

impl Scene {
    pub fn new(primitives: Vec<ScenePrimitive>) -> Result<Self> {
        let scene = Self { primitives };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate()
                .map_err(|e| input_err(format!("primitive {i}: {e}")))?;
        }
        Ok(())
    }

    /// Nearest hit along `origin + t * dir`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<Hit> {
        self.primitives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| Hit { t, primitive: i }))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Depth seen by the camera at continuous pixel coordinates.
    pub fn depth_at(&self, intrinsics: &CameraIntrinsics, u: f64, v: f64) -> Option<f64> {
        // The camera ray has unit z, so the ray parameter is the depth.
        self.cast(&Vec3::zeros(), &intrinsics.ray(u, v)).map(|h| h.t)
    }
}

/// Ray-casts every pixel; misses are invalid with zero color.
pub fn render_depth(scene: &Scene, intrinsics: &CameraIntrinsics) -> Result<(DepthMap, HsvImage)> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    if w == 0 || h == 0 {
        return Err(input_err("image size must be non-zero"));
    }
    let hits: Vec<Option<Hit>> = (0..w * h)
        .into_par_iter()
        .map(|idx| scene.cast(&Vec3::zeros(), &intrinsics.ray((idx % w) as f64, (idx / w) as f64)))
        .collect();
    let depths = hits.iter().map(|hit| hit.map_or(0.0, |h| h.t)).collect();
    let colors = hits
        .iter()
        .map(|hit| hit.map_or(Vec3::zeros(), |h| Vec3::from(scene.primitives[h.primitive].hsv)))
        .collect();
    Ok((DepthMap::from_depths(w, h, depths)?, HsvImage::new(w, h, colors)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarSpec {
    /// Beam elevations in radians, positive up.
    pub elevations: Vec<f64>,
    pub azimuth_step: f64,
    pub range_noise_std: f64,
    /// Probability that a return from a reflective primitive is lost.
    pub reflective_dropout: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self::uniform_beams(16, -15.0, 5.0, 0.2)
    }
}

impl LidarSpec {
    /// `beams` elevations evenly spaced over `[lo_deg, hi_deg]`.
    pub fn uniform_beams(beams: usize, lo_deg: f64, hi_deg: f64, azimuth_step_deg: f64) -> Self {
        let elevations = (0..beams)
            .map(|b| {
                let f = if beams > 1 { b as f64 / (beams - 1) as f64 } else { 0.5 };
                (lo_deg + f * (hi_deg - lo_deg)).to_radians()
            })
            .collect();
        Self {
            elevations,
            azimuth_step: azimuth_step_deg.to_radians(),
            range_noise_std: 0.02,
            reflective_dropout: 1.0,
            max_range: 120.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.azimuth_step > 0.0) {
            return Err(input_err(format!("azimuth step must be positive, got {}", self.azimuth_step)));
        }
        if !(self.range_noise_std >= 0.0) {
            return Err(input_err(format!("range noise std must be >= 0, got {}", self.range_noise_std)));
        }
        if !(0.0..=1.0).contains(&self.reflective_dropout) {
            return Err(input_err(format!(
                "reflective dropout must lie in [0,1], got {}",
                self.reflective_dropout
            )));
        }
        if !(self.max_range > 0.0) {
            return Err(input_err(format!("max range must be positive, got {}", self.max_range)));
        }
        Ok(())
    }

    /// Azimuths spanning the camera's horizontal field of view, left to right.
    pub fn azimuths(&self, intrinsics: &CameraIntrinsics) -> Vec<f64> {
        let lo = (-intrinsics.cx / intrinsics.fx).atan();
        let hi = ((intrinsics.width as f64 - intrinsics.cx) / intrinsics.fx).atan();
        let count = ((hi - lo) / self.azimuth_step).floor() as usize + 1;
        (0..count).map(|i| lo + i as f64 * self.azimuth_step).collect()
    }
}

/// Unit direction for a beam in the sensor frame (x right, y down, z forward).
pub fn beam_direction(elevation: f64, azimuth: f64) -> Vec3 {
    Vec3::new(
        elevation.cos() * azimuth.sin(),
        -elevation.sin(),
        elevation.cos() * azimuth.cos(),
    )
}

/// Scans the scene from `sensor_pose` (sensor to camera frame), returning
/// camera-frame points colored by the primitive they hit.
pub fn simulate_lidar<R: Rng + ?Sized>(
    scene: &Scene,
    spec: &LidarSpec,
    intrinsics: &CameraIntrinsics,
    sensor_pose: &Pose,
    rng: &mut R,
) -> Result<PointCloud> {
    spec.validate()?;
    let origin = *sensor_pose.translation_vector();
    let azimuths = spec.azimuths(intrinsics);
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for &el in &spec.elevations {
        for &az in &azimuths {
            let dir = sensor_pose.rotate(&beam_direction(el, az));
            let Some(hit) = scene.cast(&origin, &dir) else {
                continue;
            };
            let prim = &scene.primitives[hit.primitive];
            let dropped = prim.reflective && rng.random::<f64>() < spec.reflective_dropout;
            let noise: f64 = StandardNormal.sample(rng);
            if dropped || hit.t > spec.max_range {
                continue;
            }
            let range = hit.t + spec.range_noise_std * noise;
            if range <= 0.0 {
                continue;
            }
            points.push(origin + dir * range);
            colors.push(Vec3::from(prim.hsv));
        }
    }
    PointCloud::from_points(points).with_hsv(colors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HoleMode {
    Invalidate,
    Offset { meters: f64 },
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hole {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    #[serde(flatten)]
    pub mode: HoleMode,
}

impl Hole {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Corruption {
    pub noise_std: f64,
    pub bias: f64,
    pub holes: Vec<Hole>,
}

/// Adds seeded Gaussian noise and bias to valid pixels, applies holes and
/// clamps to `[MIN_DEPTH, MAX_DEPTH]`.
pub fn corrupt_depth<R: Rng + ?Sized>(depth: &DepthMap, corruption: &Corruption, rng: &mut R) -> Result<DepthMap> {
    if !(corruption.noise_std >= 0.0) {
        return Err(input_err(format!("noise std must be >= 0, got {}", corruption.noise_std)));
    }
    let noise = Normal::new(0.0, corruption.noise_std).map_err(|e| input_err(e.to_string()))?;
    let mut out = depth.clone();
    for row in 0..depth.height() {
        for col in 0..depth.width() {
            let Some(d) = depth.get(row, col) else {
                continue;
            };
            let mut value = d + corruption.bias + noise.sample(rng);
            let mut keep = true;
            for hole in corruption.holes.iter().filter(|h| h.contains(row, col)) {
                match hole.mode {
                    HoleMode::Invalidate => keep = false,
                    HoleMode::Offset { meters } => value += meters,
                }
            }
            if keep {
                out.set(row, col, value.clamp(MIN_DEPTH, MAX_DEPTH))?;
            } else {
                out.invalidate(row, col);
            }
        }
    }
    Ok(out)
}

/// Seeded desk-scale scenes used by the tests and the acceptance suite.
pub mod suite {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 64x48 pinhole camera with a 77° x 62° field of view.
    pub fn camera() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 31.5,
            cy: 23.5,
            width: 64,
            height: 48,
        }
    }

    /// Scan-line LIDAR spanning the camera's vertical field of view.
    pub fn lidar_spec() -> LidarSpec {
        LidarSpec::uniform_beams(24, -30.0, 30.0, 0.4)
    }

    #[derive(Debug, Clone)]
    pub struct SyntheticScene {
        pub name: String,
        pub scene: Scene,
        pub intrinsics: CameraIntrinsics,
        pub gt_depth: DepthMap,
        pub hsv: HsvImage,
        pub lidar: PointCloud,
        /// Rectangles whose initial depth is distorted.
        pub holes: Vec<Hole>,
    }

    fn ground(hsv: [f64; 3]) -> ScenePrimitive {
        ScenePrimitive {
            shape: Shape::Plane {
                point: [0.0, 1.5, 0.0],
                normal: [0.0, -1.0, 0.0],
                extent: 200.0,
            },
            hsv,
            reflective: false,
        }
    }

    fn wall(z: f64, hsv: [f64; 3]) -> ScenePrimitive {
        ScenePrimitive {
            shape: Shape::Plane {
                point: [0.0, 0.0, z],
                normal: [0.0, 0.0, -1.0],
                extent: 200.0,
            },
            hsv,
            reflective: false,
        }
    }

    /// Ground, back wall and three boxes with seeded placement and color.
    pub fn plane_and_boxes(seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primitives = vec![ground([0.25, 0.3, 0.5]), wall(14.0, [0.6, 0.2, 0.7])];
        for b in 0..3 {
            let half = [
                rng.random_range(0.4..1.0),
                rng.random_range(0.4..1.0),
                rng.random_range(0.4..1.0),
            ];
            let x = -3.0 + 3.0 * b as f64 + rng.random_range(-0.5..0.5);
            let z = rng.random_range(5.0..10.0);
            primitives.push(ScenePrimitive {
                shape: Shape::Box {
                    center: [x, 1.5 - half[1], z],
                    half_extents: half,
                    rotation: [0.0, rng.random_range(-0.6..0.6), 0.0],
                },
                hsv: [rng.random_range(0.0..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)],
                reflective: false,
            });
        }
        Scene { primitives }
    }

    /// A wall with a reflective window panel, plus ground and one box.
    pub fn reflective_wall(seed: u64) -> (Scene, [f64; 4]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wall_z = rng.random_range(7.0..9.0);
        let window = [rng.random_range(-1.0..1.0), rng.random_range(-1.2..-0.4), 1.2, 0.8];
        let primitives = vec![
            ground([0.25, 0.3, 0.5]),
            wall(wall_z, [0.08, 0.4, 0.8]),
            ScenePrimitive {
                shape: Shape::Box {
                    center: [window[0], window[1], wall_z - 0.02],
                    half_extents: [window[2], window[3], 0.02],
                    rotation: [0.0; 3],
                },
                hsv: [0.55, 0.3, 0.9],
                reflective: true,
            },
            ScenePrimitive {
                shape: Shape::Box {
                    center: [rng.random_range(2.0..3.0), 1.0, wall_z - 3.0],
                    half_extents: [0.5, 0.5, 0.5],
                    rotation: [0.0, 0.4, 0.0],
                },
                hsv: [0.0, 0.8, 0.7],
                reflective: false,
            },
        ];
        (Scene { primitives }, window)
    }

    pub fn build(name: &str, scene: Scene, holes: Vec<Hole>, seed: u64) -> Result<SyntheticScene> {
        let intrinsics = camera();
        let (gt_depth, hsv) = render_depth(&scene, &intrinsics)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x11DA_2000);
        let lidar = simulate_lidar(&scene, &lidar_spec(), &intrinsics, &Pose::identity(), &mut rng)?;
        Ok(SyntheticScene {
            name: name.to_string(),
            scene,
            intrinsics,
            gt_depth,
            hsv,
            lidar,
            holes,
        })
    }

    pub fn noisy_plane_and_boxes(seed: u64) -> Result<SyntheticScene> {
        build(&format!("plane-and-boxes-{seed}"), plane_and_boxes(seed), Vec::new(), seed)
    }

    /// Reflective-window scene; the window's pixels become an offset hole.
    pub fn reflective_hole(seed: u64, offset: f64) -> Result<SyntheticScene> {
        let (scene, window) = reflective_wall(seed);
        let k = camera();
        let wall_z = match scene.primitives[1].shape {
            Shape::Plane { point, .. } => point[2],
            _ => unreachable!(),
        };
        let front = wall_z - 0.04;
        let (u0, v0) = k.project(&Vec3::new(window[0] - window[2], window[1] - window[3], front));
        let (u1, v1) = k.project(&Vec3::new(window[0] + window[2], window[1] + window[3], front));
        let hole = Hole {
            row: v0.ceil().max(0.0) as usize,
            col: u0.ceil().max(0.0) as usize,
            // Cells are the floor of the projection, so the far edge is exclusive.
            height: (v1.floor() - v0.ceil()).max(0.0) as usize,
            width: (u1.floor() - u0.ceil()).max(0.0) as usize,
            mode: HoleMode::Offset { meters: offset },
        };
        build(&format!("reflective-hole-{seed}"), scene, vec![hole], seed)
    }
}
