//! Scalar abstraction: every numeric kernel in this crate is generic over
//! `Scalar`, which is implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point precision of a tensor's element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Element type for tensors: `f32` or `f64`.
///
/// Gradient checks and oracle comparisons run in `f64`; training defaults to
/// `f32`. The `erf` hook always evaluates in double precision so the exact
/// GELU is identical across element types up to the final rounding.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const PRECISION: Precision;

    /// Lossy conversion from `f64`; exact for `f64`, rounded for `f32`.
    fn from_f64_lossy(x: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    /// Gauss error function, evaluated in double precision.
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self as f64) as f32
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn from_f64_lossy(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        assert_eq!(Scalar::erf(0.0f64), 0.0);
        // erf(1) from standard tables.
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(5.0f64) - 1.0).abs() < 1e-11);
        assert_eq!(Scalar::erf(-1.5f64), -Scalar::erf(1.5f64));
    }

    #[test]
    fn f32_erf_matches_f64_path() {
        assert_eq!(Scalar::erf(0.73f32), libm::erf(0.73f32 as f64) as f32);
    }
}
