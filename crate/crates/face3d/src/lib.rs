//! Single-image 3D face reconstruction.
//!
//! A coefficient-regression pipeline: a hierarchical attention CNN maps a
//! face crop to a 257-dimensional coefficient vector (identity, expression,
//! texture, pose, lighting), which a morphable model plus a reference
//! differentiable rasterizer turns back into an image. Training minimizes a
//! five-term photometric / perceptual / landmark / regularization objective
//! end to end; evaluation covers sparse-landmark NME with yaw bucketing and
//! ICP-aligned point-to-plane RMSE between meshes.

pub mod autodiff;
pub mod backbone;
pub mod camera;
pub mod coeffs;
pub mod container;
pub mod error;
pub mod gradcheck;
pub mod illumination;
pub mod losses;
pub mod mesh;
pub mod morphable_model;
pub mod renderer;

pub use error::{Error, ErrorKind, Result};
