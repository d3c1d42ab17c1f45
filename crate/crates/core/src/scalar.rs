//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is
//! `num_traits::Float` plus the conversions and special functions the
//! Weibull/gamma math needs. `f32` and `f64` are the provided instances;
//! the crate-root aliases pin `f64`, which is what the experiments and
//! tolerance checks use.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::tensor::special;

/// Floating scalar with the hooks the tensor/distribution code relies on.
///
/// Special functions route through `f64` kernels; for `f64` this is exact,
/// for `f32` it is more accurate than a native single-precision evaluation
/// would be.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Display
    + Debug
    + Default
    + 'static
{
    /// Lossy conversion from `f64`, used for constants.
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("constant representable")
    }

    /// Widening conversion used by metrics and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Conversion from a count.
    fn from_usize_exact(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable")
    }

    /// Map 64 random bits to a uniform value in `[0, 1)` using the top
    /// mantissa-width bits, so streams are bit-reproducible per type.
    fn unit_from_bits(bits: u64) -> Self;

    /// ln Γ(x), x > 0.
    fn lgamma(self) -> Self {
        Self::from_f64(special::lgamma(self.to_f64_lossy()))
    }

    /// ψ(x) = d/dx ln Γ(x), x > 0.
    fn digamma(self) -> Self {
        Self::from_f64(special::digamma(self.to_f64_lossy()))
    }

    /// ψ'(x), x > 0.
    fn trigamma(self) -> Self {
        Self::from_f64(special::trigamma(self.to_f64_lossy()))
    }

    /// Stable ln(1 + exp(x)).
    fn softplus(self) -> Self {
        let zero = Self::zero();
        self.max(zero) + (-(self.abs())).exp().ln_1p()
    }
}

impl Scalar for f64 {
    fn unit_from_bits(bits: u64) -> Self {
        // 53 mantissa bits.
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl Scalar for f32 {
    fn unit_from_bits(bits: u64) -> Self {
        // 24 mantissa bits.
        (bits >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_from_bits_is_half_open() {
        assert_eq!(f64::unit_from_bits(0), 0.0);
        assert!(f64::unit_from_bits(u64::MAX) < 1.0);
        assert!(f32::unit_from_bits(u64::MAX) < 1.0);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        assert!((0.0f64.softplus() - 0.6931471805599453).abs() < 1e-15);
    }

    #[test]
    fn softplus_stable_for_large_inputs() {
        assert!((1000.0f64.softplus() - 1000.0).abs() < 1e-12);
        assert!((-1000.0f64).softplus() >= 0.0);
        assert!((-1000.0f64).softplus().is_finite());
    }
}
