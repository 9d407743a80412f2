//! Scalar abstraction shared by plain floating-point evaluation and the
//! reverse-mode tape.
//!
//! Every density in the crate is written once against [`Real`]. Evaluating it
//! with `f64` gives the value; evaluating it with [`crate::autodiff::Var`]
//! records the computation so the gradient can be pulled back.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Copy
    + Debug
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    /// Lift a constant. Constants never carry derivative information.
    fn cst(c: f64) -> Self;
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn ln_1p(self) -> Self;
    fn powi(self, n: i32) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn scale(self, c: f64) -> Self {
        self * Self::cst(c)
    }

    fn offset(self, c: f64) -> Self {
        self + Self::cst(c)
    }

    /// `Σ_k coefs[k] * xs[k]`.
    fn dot(coefs: &[f64], xs: &[Self]) -> Self {
        Self::dot_blocks(&[(coefs, xs)])
    }

    /// Several dot products summed into one value, accumulated in order.
    fn dot_blocks(blocks: &[(&[f64], &[Self])]) -> Self {
        let mut acc = Self::zero();
        for (coefs, xs) in blocks {
            debug_assert_eq!(coefs.len(), xs.len());
            for (&c, &x) in coefs.iter().zip(xs.iter()) {
                if c != 0.0 {
                    acc += x.scale(c);
                }
            }
        }
        acc
    }

    fn sum(xs: &[Self]) -> Self {
        let mut acc = Self::zero();
        for &x in xs {
            acc += x;
        }
        acc
    }

    fn square(self) -> Self {
        self * self
    }

    /// Mark `self` as the branch chosen by a max/min comparison.
    fn select(self) -> Self {
        self
    }

    /// A value whose partial derivatives with respect to `parents` were
    /// computed by hand. Plain floats keep only the value.
    fn precomputed(value: f64, parents: &[(Self, f64)]) -> Self {
        let _ = parents;
        Self::cst(value)
    }

    fn is_finite(self) -> bool {
        self.value().is_finite()
    }
}

impl<F> Real for F
where
    F: Float + FromPrimitive + Debug + AddAssign,
{
    fn cst(c: f64) -> Self {
        F::from_f64(c).unwrap_or_else(F::nan)
    }

    fn value(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn exp(self) -> Self {
        Float::exp(self)
    }

    fn ln(self) -> Self {
        Float::ln(self)
    }

    fn sqrt(self) -> Self {
        Float::sqrt(self)
    }

    fn tanh(self) -> Self {
        Float::tanh(self)
    }

    fn ln_1p(self) -> Self {
        Float::ln_1p(self)
    }

    fn powi(self, n: i32) -> Self {
        Float::powi(self, n)
    }
}

/// Log density of `N(mean, sd²)` at `x`.
pub fn normal_lpdf<T: Real>(x: T, mean: T, sd: T) -> T {
    let z = (x - mean) / sd;
    T::cst(-0.5 * (2.0 * std::f64::consts::PI).ln()) - sd.ln() - z.square().scale(0.5)
}

/// Log density of `Cauchy(0, scale)` at `x`.
pub fn cauchy_lpdf<T: Real>(x: T, scale: f64) -> T {
    let z = x.scale(1.0 / scale);
    T::cst(-(std::f64::consts::PI * scale).ln()) - z.square().ln_1p()
}

/// Log density of the half-Cauchy(0, scale) distribution on `x > 0`.
pub fn half_cauchy_lpdf<T: Real>(x: T, scale: f64) -> T {
    cauchy_lpdf(x, scale) + T::cst(std::f64::consts::LN_2)
}

/// Numerically stable `log(exp(a) + exp(b))` on plain floats.
pub fn log_sum_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generic_over_f32_and_f64() {
        fn poly<T: Real>(x: T) -> T {
            x * x + x.scale(2.0) + T::one()
        }
        assert_eq!(poly(3.0_f64), 16.0);
        assert_eq!(poly(3.0_f32), 16.0);
    }

    #[test]
    fn densities_match_closed_forms() {
        let lp = normal_lpdf(0.0, 0.0, 1.0);
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
        let c = cauchy_lpdf(5.0, 5.0);
        assert!((c - (1.0 / (std::f64::consts::PI * 5.0 * 2.0)).ln()).abs() < 1e-14);
        let h = half_cauchy_lpdf(0.0, 5.0);
        assert!((h - (2.0 / (std::f64::consts::PI * 5.0)).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_handles_infinities() {
        assert_eq!(log_sum_exp(f64::NEG_INFINITY, 1.5), 1.5);
        assert!((log_sum_exp(0.0, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((log_sum_exp(1000.0, 1000.0) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
