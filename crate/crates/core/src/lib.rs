//! Differentiable dynamic Gaussian splatting.
//!
//! A canonical [`GaussianCloud`] is deformed per timestep by a hex-plane
//! [`HexPlaneField`], rendered by a tile-based rasterizer with an analytic
//! backward pass, and optimized in two stages by the [`trainer`] with
//! quantile-based densification and optional multi-view score distillation.
//! The [`attention`] module holds the anchored key/value mixing kernel used
//! for temporally consistent multi-view generation.

pub mod attention;
pub mod camera;
pub mod densify;
pub mod deformation;
pub mod error;
pub mod gaussian;
pub mod frame;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod raster;
pub mod real;
pub mod sds;
pub mod sh;
pub mod trainer;

pub use camera::Camera;
pub use deformation::{DeformationGrads, FieldConfig, HexPlaneField};
pub use error::{Error, Result};
pub use gaussian::{build_covariance, eval_sh, Covariance3D, DeformedSnapshot, GaussianCloud};
pub use raster::{project, render, render_backward, Projection, RenderOutput, SnapshotGrads};
pub use real::Real;
