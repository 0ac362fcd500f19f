use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Scalar element type. `f64` is used for verification, `f32` for training.
pub trait Real:
    Float
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Width in bits, recorded in reports.
    const BITS: u32;

    fn erf(self) -> Self;

    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BITS: u32 = 64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BITS: u32 = 32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}
