//! Inference and architecture analysis for RegSeg, a real-time semantic
//! segmentation network built from dilated grouped residual blocks.
//!
//! Numerical code is generic over [`Scalar`] (`f32` and `f64`); the aliases
//! below name the concrete instantiations used in practice.

pub mod error;
pub mod fov;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod ops;
pub mod scalar;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{ModelGraph, Preset};
pub use scalar::Scalar;
pub use schedule::{DilationSchedule, Dilations};
pub use tensor::{Shape, Tensor};

/// Inference tensors.
pub type Tensor32 = Tensor<f32>;
/// Wide tensors for analysis sweeps.
pub type Tensor64 = Tensor<f64>;
