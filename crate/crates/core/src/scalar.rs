//! Floating-point scalar abstraction.
//!
//! Every numeric kernel in this crate is generic over [`Scalar`] so the same
//! code path runs in `f32` and `f64`. The trait is a thin alias over the
//! `num-traits` float hierarchy plus the assign-ops and marker bounds the
//! matrix kernels need; it carries two conversion helpers so generic code can
//! spell constants without unwrapping `NumCast` at every call site.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar: implemented for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` constant into the working scalar type.
    fn of(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant must be representable in the scalar type")
    }

    /// Converts a count into the working scalar type.
    fn of_usize(count: usize) -> Self {
        Self::from_usize(count).expect("count must be representable in the scalar type")
    }

    /// Lossy view of the value as `f64`, used for reporting and error text.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must be viewable as f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}
