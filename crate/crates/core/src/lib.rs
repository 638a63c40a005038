#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod appearance;
pub mod codec;
pub mod error;
pub mod frames;
pub mod linalg;
pub mod merge;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod select;
pub mod splat;
pub mod svq;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Gaussian4Df32 = model::Gaussian4D<f32>;
pub type Gaussian4Df64 = model::Gaussian4D<f64>;
pub type GaussianCloudF32 = model::GaussianCloud<f32>;
pub type GaussianCloudF64 = model::GaussianCloud<f64>;
pub type CameraF32 = model::Camera<f32>;
pub type CameraF64 = model::Camera<f64>;
