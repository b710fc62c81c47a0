//! Pose-conditioned avatar generation on explicit voxel radiance fields.
//!
//! The pipeline optimizes a density/color voxel grid by score distillation:
//! every iteration renders the grid and a part-labeled condition image of a
//! posed parametric body from the same camera, asks a noise-prediction oracle
//! for `eps_hat`, and back-propagates `w(t) (eps_hat - eps)` through the
//! differentiable volume renderer. A progressive schedule grows the grid,
//! shrinks its bounding box and moves the camera closer over time, and a
//! Gaussian smoothness term on the density gradient field keeps surfaces clean.
//!
//! Module map:
//! - [`body_model`]: shape blendshapes, joint regression, linear blend skinning.
//! - [`raster`]: z-buffered part-label rasterization and the camera model.
//! - [`voxel_field`]: bounded grids, trilinear sampling, resampling, bbox shrinking.
//! - [`renderer`]: differentiable ray marching (forward and exact adjoint).
//! - [`guidance`]: noise schedules, SDS pixel gradients, built-in and external oracles.
//! - [`schedule`]: progressive grid/radius/focus plan and camera sampling.
//! - [`regularize`]: separable Gaussian smoothing loss and its adjoint.
//! - [`optimize`]: initialization, Adam updates and the coarse training loop.
//! - [`mesh_export`]: marching cubes, color baking, OBJ/PLY I/O.
//! - [`config`]: run configuration file and dotted-key overrides.
//! - [`gradcheck`]: finite-difference and brute-force checks of the adjoints and rasterizer.

pub mod body_model;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod image_io;
pub mod mesh_export;
pub mod optimize;
pub mod raster;
pub mod regularize;
pub mod renderer;
pub mod schedule;
pub mod voxel_field;

pub use error::{Error, Result};

/// 3D vector type used throughout the crate.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix type used throughout the crate.
pub type Mat3 = nalgebra::Matrix3<f64>;
