//! Compact CNN engine with structural pruning and weight compression.
//!
//! Everything is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases at the crate root fix `f32` as the working precision used by the
//! pipeline. Reductions accumulate in `f64` regardless of the scalar type.

pub mod arch;
pub mod compress;
pub mod dataset;
pub mod error;
pub mod importance;
pub mod io;
pub mod kernels;
pub mod network;
pub mod pruner;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

/// Working-precision tensor used throughout the pipeline.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, mostly for oracle-style tests.
pub type Tensor64 = tensor::Tensor<f64>;
