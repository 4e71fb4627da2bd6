//! Scalar abstraction so the numeric core runs in either f32 or f64.
//!
//! Training and gradient verification use f64; f32 is available for
//! memory-constrained inference. All bounds are what `ndarray` matmul and
//! elementwise arithmetic need.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum<Self>
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Shorthand for lossless-enough conversion from f64 literals.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 -> scalar conversion")
    }

    /// Widen to f64 for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar -> f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an f64 constant into the working scalar type.
pub fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
