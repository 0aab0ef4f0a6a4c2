//! Contextual cross-stage detection with a jointly trained restoration front end.
//!
//! The crate is generic over the floating point type through [`Scalar`];
//! `f32` is used for training and `f64` for gradient checks. Aliases for both
//! are exported at the crate root.

pub mod degrade;
pub mod denoiser;
pub mod detector;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod params;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{FeatureMap, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type HeadOutput32 = detector::HeadOutput<f32>;
pub type HeadOutput64 = detector::HeadOutput<f64>;
pub type Detection32 = detector::Detection<f32>;
pub type Detection64 = detector::Detection<f64>;
