//! Floating-point element type shared by every numeric routine in the crate.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use twofloat::TwoFloat;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` and `f64`. Gradient verification needs `f64`;
/// `f32` is usable for inference and training where that precision is enough.
/// [`TwoFloat`] (double-double) only serves as a low-roundoff reference when
/// finite-differencing tiny gradients.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short tag stored in binary containers.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    fn half() -> Self {
        Self::of(0.5)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for TwoFloat {
    const DTYPE: &'static str = "f64x2";

    #[inline]
    fn of(x: f64) -> Self {
        TwoFloat::from(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.into()
    }
}
