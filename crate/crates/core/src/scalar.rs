//! Scalar abstraction for the numeric core.
//!
//! Every numeric kernel in this crate is generic over [`Scalar`] so the same
//! code runs in f32 or f64. The crate root exports f64 aliases, which are the
//! default working precision; file formats always store f64 on disk.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by every kernel in the crate.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an f64 literal into `T`. Panics only if `T` cannot represent
/// any approximation of the value, which cannot happen for f32/f64.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("float literal conversion")
}

/// Lossy view of a `T` as f64, for diagnostics and file output.
#[inline]
pub fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().expect("scalar to f64")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip_in_f64() {
        let x: f64 = lit(0.25);
        assert_eq!(x, 0.25);
        assert_eq!(to_f64(x), 0.25);
    }

    #[test]
    fn f32_narrowing_is_nearest() {
        let x: f32 = lit(1.0e-3);
        assert!((f64::from(x) - 1.0e-3).abs() < 1.0e-9);
    }
}
