//! Scalar special functions.
//!
//! `core` has no transcendental float functions, so everything goes through
//! `libm`. The normal CDF is built on `libm::erfc`, whose rational
//! approximations keep relative accuracy deep into the lower tail.

pub use core::f64::consts::{LN_2, PI};

/// ln(sqrt(2 pi)).
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub const SQRT_2: f64 = core::f64::consts::SQRT_2;

/// Below this point log Phi switches to the continued fraction for the Mills ratio.
const LOG_CDF_TAIL: f64 = -8.0;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[inline]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline]
pub fn abs(x: f64) -> f64 {
    libm::fabs(x)
}

#[inline]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline]
pub fn powi(x: f64, n: i32) -> f64 {
    libm::pow(x, n as f64)
}

#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

#[inline]
pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    exp(-0.5 * x * x - LN_SQRT_2PI)
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// log of the standard normal CDF, finite for every finite `x`.
pub fn log_norm_cdf(x: f64) -> f64 {
    if x < LOG_CDF_TAIL {
        // Phi(x) = pdf(x) * R(-x) with R the Mills ratio.
        -0.5 * x * x - LN_SQRT_2PI + ln(mills_ratio(-x))
    } else if x > 0.0 {
        ln_1p(-0.5 * erfc(x / SQRT_2))
    } else {
        ln(norm_cdf(x))
    }
}

/// Mills ratio (1 - Phi(z)) / pdf(z) for z >= 8 by Laplace's continued fraction.
fn mills_ratio(z: f64) -> f64 {
    let mut t = z;
    for k in (1..=60).rev() {
        t = z + k as f64 / t;
    }
    1.0 / t
}

/// Mean and variance of max(Y, 0) for Y ~ N(mu, sd^2).
pub fn censored_normal_moments(mu: f64, sd: f64) -> (f64, f64) {
    let z = mu / sd;
    let cdf = norm_cdf(z);
    let pdf = norm_pdf(z);
    let mean = mu * cdf + sd * pdf;
    let second = (mu * mu + sd * sd) * cdf + mu * sd * pdf;
    let var = second - mean * mean;
    (mean, if var > 0.0 { var } else { 0.0 })
}
