//! Probability scalar abstraction.
//!
//! The allocation formulas and the exact-enumeration oracle are written
//! once, generically, and instantiated either with `f64` (default, 1e-9
//! tolerances) or with [`BigRational`] (exact mode). Every finite `f64`
//! is a dyadic rational, so embedding model outputs into `BigRational`
//! is lossless and the oracle identities hold with zero deviation.

use std::ops::{Add, Div, Mul, Sub};

use num::rational::BigRational;
use num::{FromPrimitive, ToPrimitive, Zero};

/// Arithmetic required of a probability scalar.
pub trait Scalar:
    Clone
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + std::fmt::Debug
{
    fn zero() -> Self;
    fn one() -> Self;
    /// Exact embedding of a finite `f64`.
    fn from_f64(x: f64) -> Self;
    /// Nearest `f64` (used only for reporting deviations).
    fn to_f64(&self) -> f64;

    fn is_zero(&self) -> bool {
        *self == Self::zero()
    }

    /// `max(self - other, 0)`, the positive part used throughout Eqs. of
    /// the transport plan.
    fn pos_sub(&self, other: &Self) -> Self {
        if *self > *other {
            self.clone() - other.clone()
        } else {
            Self::zero()
        }
    }

    fn min_of(a: Self, b: Self) -> Self {
        if a < b {
            a
        } else {
            b
        }
    }

    /// Hook applied when a float probability vector is embedded. The f64
    /// embedding is the identity; the rational embedding renormalizes by
    /// the exact sum, since float normalization leaves the rational sum a
    /// few ulps off 1 and the oracle identities need exact distributions.
    fn embed_probs(probs: Vec<Self>) -> Vec<Self> {
        probs
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Scalar for BigRational {
    fn zero() -> Self {
        Zero::zero()
    }
    fn one() -> Self {
        num::One::one()
    }
    fn from_f64(x: f64) -> Self {
        <BigRational as FromPrimitive>::from_f64(x)
            .expect("finite f64 embeds exactly into a rational")
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or_else(|| {
            // Extremely large terms can overflow the direct conversion;
            // fall back through a reduced float ratio.
            let n = self.numer().to_f64().unwrap_or(f64::MAX);
            let d = self.denom().to_f64().unwrap_or(f64::MAX);
            n / d
        })
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }

    fn embed_probs(probs: Vec<Self>) -> Vec<Self> {
        let sum: BigRational = probs.iter().cloned().fold(Zero::zero(), |a, b| a + b);
        if Zero::is_zero(&sum) {
            return probs;
        }
        probs.into_iter().map(|p| p / sum.clone()).collect()
    }
}

/// Absolute deviation as `f64`, for report thresholds.
pub fn abs_dev<P: Scalar>(a: &P, b: &P) -> f64 {
    let d = a.clone() - b.clone();
    if d < P::zero() {
        -(d.to_f64())
    } else {
        d.to_f64()
    }
}

/// Signed check that `value` is at least `bound - slack` (slack in f64).
pub fn at_least<P: Scalar>(value: &P, bound: &P, slack: f64) -> bool {
    if value >= bound {
        return true;
    }
    (bound.clone() - value.clone()).to_f64() <= slack
}

#[cfg(test)]
mod tests {
    use super::*;
    use num::Signed;

    #[test]
    fn f64_embeds_exactly_into_rationals() {
        for x in [0.1, 0.25, 1.0 / 3.0, 1e-12, 0.9999999] {
            let r: BigRational = Scalar::from_f64(x);
            assert_eq!(Scalar::to_f64(&r), x);
        }
    }

    #[test]
    fn pos_sub_clamps_at_zero() {
        assert_eq!(0.3f64.pos_sub(&0.1), 0.3 - 0.1);
        assert_eq!(0.1f64.pos_sub(&0.3), 0.0);
        let a: BigRational = Scalar::from_f64(0.5);
        let b: BigRational = Scalar::from_f64(0.75);
        assert!(Scalar::is_zero(&a.pos_sub(&b)));
        assert!(b.pos_sub(&a).is_positive());
    }
}
