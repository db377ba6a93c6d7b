//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checks and oracle comparisons run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn of(x: f64) -> Self;

    fn erf(self) -> Self;

    fn to_f32_lossy(self) -> f32;

    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }

    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
