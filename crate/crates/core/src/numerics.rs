//! Special functions and stable reductions used by the variational updates.

use crate::error::{Error, Result};

/// Below this argument the functions shift upward with the recurrence
/// before applying the asymptotic series.
const ASYMPTOTIC_THRESHOLD: f64 = 10.0;

/// B_{2k} / (2k) for k = 1..7.
const DIGAMMA_SERIES: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// Bernoulli numbers B_{2k} for k = 1..7.
const TRIGAMMA_SERIES: [f64; 7] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
];

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { function: "digamma", x });
    }
    Ok(digamma_unchecked(x))
}

/// ψ₁(x) = d²/dx² ln Γ(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { function: "trigamma", x });
    }
    Ok(trigamma_unchecked(x))
}

/// Digamma without the domain check, for hot loops whose arguments are
/// positive by construction (Dirichlet parameters bounded below by the prior).
#[inline]
pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_SERIES {
        series += c * pow;
        pow *= inv2;
    }
    shift + x.ln() - 0.5 / x - series
}

#[inline]
pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv;
    for b in TRIGAMMA_SERIES {
        series += b * pow;
        pow *= inv2;
    }
    shift + inv + 0.5 * inv2 + series
}

/// ln Γ(x), delegated to statrs' Lanczos approximation.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// log Σ exp(v) via max-shift. Entries may be −∞; all −∞ yields −∞.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Argument("log_sum_exp of an empty list".into()));
    }
    Ok(log_sum_exp_nonempty(values))
}

#[inline]
pub(crate) fn log_sum_exp_nonempty(values: &[f64]) -> f64 {
    if values.len() == 1 {
        return values[0];
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
