//! Scalar abstraction shared by every numerical routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// All estimator and degrees-of-freedom code is written against this trait.
/// The tolerances quoted in the tests assume `f64`.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive {}

impl<T> Real for T where T: RealField + Copy + FromPrimitive + ToPrimitive {}

/// Converts an `f64` literal into `T`.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    <T as FromPrimitive>::from_f64(x).expect("literal representable in scalar type")
}

/// Converts a count into `T`.
#[inline]
pub fn count<T: Real>(n: usize) -> T {
    <T as FromPrimitive>::from_usize(n).expect("count representable in scalar type")
}

/// Lossy conversion to `f64`, used at reporting boundaries.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    <T as ToPrimitive>::to_f64(&x).unwrap_or(f64::NAN)
}
