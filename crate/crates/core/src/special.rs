//! Error-function helpers shared by the folded-normal closed forms.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub(crate) const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Scaled complementary error function `exp(x^2) * erfc(x)` for `x >= 0`.
pub(crate) fn erfcx(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x < 10.0 {
        return erfc(x) * (x * x).exp();
    }
    // Continued fraction, evaluated bottom-up; 60 levels is far past
    // convergence for x >= 10.
    let mut tail = x;
    for k in (1..=60).rev() {
        tail = x + (k as f64 / 2.0) / tail;
    }
    1.0 / (PI.sqrt() * tail)
}

/// Standard normal CDF.
pub(crate) fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(z)`.
pub(crate) fn norm_sf(z: f64) -> f64 {
    0.5 * erfc(z * FRAC_1_SQRT_2)
}
