//! Tiny-Sepformer: a time-domain speech separation network whose dual-path
//! blocks split channels between multi-head attention and depthwise
//! separable convolution, with optional weight sharing across iterations.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod autodiff;
pub mod ca;
pub mod checkpoint;
pub mod chunking;
pub mod codec;
pub mod config;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params_count;
pub mod scalar;
pub mod tensor;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::TinySepformer;
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = TinySepformer<f32>;
pub type Model64 = TinySepformer<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
