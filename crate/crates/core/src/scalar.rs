//! Scalar abstraction shared by every numeric module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the crate: `f32` or `f64`.
///
/// Everything numeric is written against this trait; the concrete aliases at
/// the crate root pin it to `f64`, which is what the tolerances in the test
/// suite assume.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + std::fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Panics only if the value is not representable,
    /// which cannot happen for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    #[inline]
    fn is_finite_real(self) -> bool {
        self.as_f64().is_finite()
    }

    /// Smallest positive normal value.
    fn min_positive() -> Self;

    /// `ln(1 + e^x)` without overflow, floored at [`Real::min_positive`] so
    /// the result stays strictly positive where `e^x` underflows.
    #[inline]
    fn softplus(self) -> Self {
        let zero = Self::zero();
        (self.max(zero) + (-self.abs()).exp().ln_1p()).max(Self::min_positive())
    }

    /// Logistic function, the derivative of [`Real::softplus`].
    #[inline]
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Real for f32 {
    fn min_positive() -> Self {
        f32::MIN_POSITIVE
    }
}
impl Real for f64 {
    fn min_positive() -> Self {
        f64::MIN_POSITIVE
    }
}

/// `ln Σ exp(v_i)`, stable for large magnitudes. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
    if !max.is_finite_real() {
        return max;
    }
    let sum = values
        .iter()
        .fold(T::zero(), |acc, &v| acc + (v - max).exp());
    max + sum.ln()
}

/// `ln(2π)`.
pub fn ln_two_pi<T: Real>() -> T {
    T::two_pi().ln()
}
