//! Floating-point element trait for tensors and network parameters.
//!
//! All numeric code in this crate is generic over [`Scalar`]; the shipped
//! pipeline and the on-disk formats use `f32` (see the `Tensor32` /
//! `Network32` aliases at the crate root). Reductions accumulate in `f64`
//! regardless of the element type so that accuracy comparisons stay stable.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Widen to the `f64` accumulator domain.
    fn to_acc(self) -> f64;

    /// Narrow an `f64` accumulator back to the element type.
    fn from_acc(acc: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_acc(acc: f64) -> Self {
        acc as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_acc(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_acc(acc: f64) -> Self {
        acc
    }
}
