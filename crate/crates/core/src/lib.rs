//! Continuous 3D loss between a dense depth map and a sparse LIDAR cloud.
//!
//! A depth map is back-projected into a point cloud `X`; the LIDAR cloud `Z`
//! is treated as ground truth. Both clouds are read as kernel-weighted
//! functions and the loss is the negated inner product of the two,
//!
//! ```text
//! L(X, Z) = -Σ_i Σ_j c_ij k(x_i, z_j),   k(x, z) = σ exp(-|x - z| / s)
//! ```
//!
//! where `c_ij` multiplies an HSV color affinity and a residual-weighted normal
//! affinity. The sum is restricted to pairs that are close in image space.
//!
//! Modules:
//! - [`geometry`]: pinhole camera, depth maps, clouds, rigid transforms
//! - [`features`]: HSV conversion, grid/PCA normals, planarity residual
//! - [`kernels`]: scalar kernels and their derivatives
//! - [`loss`]: pruning, the loss, gradients, brute-force oracle
//! - [`refine`]: depth refinement by descent on the loss, depth metrics
//! - [`datagen`]: synthetic scenes, simulated LIDAR, depth corruption
//! - [`gradcheck`]: finite-difference checks of depth gradients
//! - [`flat`]: flat-array entry point for foreign callers

pub mod datagen;
pub mod error;
pub mod features;
pub mod flat;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod refine;

pub use error::{Error, Result};
pub use features::NormalEstimate;
pub use geometry::{CameraIntrinsics, DepthMap, HsvImage, Pixel, PointCloud, Pose, Vec3};
pub use kernels::{KernelConfig, NormalGradMode, S0Law, ScaleMode};
pub use loss::{LossForm, LossReport, PairSet};
