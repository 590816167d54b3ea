//! Scalar abstraction for the geometric core.
//!
//! Projection, homography estimation, calibration and PnP are written once
//! against [`Real`] and instantiated for `f64` (the default everywhere in the
//! pipeline) and `f32` (useful for embedded consumers that only need
//! projection and pose refinement at pixel-level accuracy).

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating point scalar usable by the geometry modules: `f32` or `f64`.
pub trait Real: RealField + Copy + ToPrimitive {}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Real>(v: f64) -> T {
    nalgebra::convert(v)
}

/// Lossy conversion back to `f64` (used by file formats and reports).
#[inline]
pub fn to_f64<T: Real>(v: T) -> f64 {
    ToPrimitive::to_f64(&v).unwrap_or(f64::NAN)
}

/// Machine epsilon based tolerance scaled for the scalar type.
#[inline]
pub fn eps<T: Real>() -> T {
    T::default_epsilon()
}
