//! Seeded random-variate generation and log-density kernels used by every
//! sampler.
//!
//! All randomness flows through [`ChaCha8Rng`] streams derived from a
//! `(seed, stream)` pair, so independent chains and replicates get
//! independent, bit-reproducible variate streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// The crate's generator type. Single-owner: split a fresh stream before
/// fanning out work, never share one across tasks.
pub type SeedRng = ChaCha8Rng;

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// log Gamma(x) for positive x.
pub fn lgamma(x: f64) -> f64 {
    ln_gamma(x)
}

/// ln(y!) via the log-gamma function.
pub fn ln_factorial(y: u32) -> f64 {
    ln_gamma(y as f64 + 1.0)
}

/// Poisson log-pmf `y ln(lambda) - lambda - ln(y!)`.
pub fn poisson_log_pmf(y: u32, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Numeric(format!("Poisson rate must be positive, got {lambda}")));
    }
    Ok(poisson_log_pmf_unchecked(y, lambda))
}

/// As [`poisson_log_pmf`] but assumes `lambda > 0`.
#[inline]
pub(crate) fn poisson_log_pmf_unchecked(y: u32, lambda: f64) -> f64 {
    y as f64 * lambda.ln() - lambda - ln_factorial(y)
}

/// Overflow-safe `ln(sum exp(v))`; `-inf` entries are permitted and an
/// all-`-inf` input yields `-inf`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Numeric("log_sum_exp of empty input".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|&v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Gamma(shape, rate) draw, i.e. mean `shape/rate`. Clamped away from zero
/// so downstream `ln` calls stay finite.
pub fn sample_gamma<R: Rng>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite() && rate > 0.0 && rate.is_finite()) {
        return Err(Error::Numeric(format!(
            "Gamma(shape={shape}, rate={rate}) is invalid"
        )));
    }
    let dist = rand_distr::Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Numeric(format!("Gamma(shape={shape}, rate={rate}): {e}")))?;
    Ok(dist.sample(rng).max(1e-300))
}

pub fn sample_beta<R: Rng>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
        return Err(Error::Numeric(format!("Beta({a}, {b}) is invalid")));
    }
    let dist = rand_distr::Beta::new(a, b)
        .map_err(|e| Error::Numeric(format!("Beta({a}, {b}): {e}")))?;
    Ok(dist.sample(rng).clamp(1e-15, 1.0 - 1e-15))
}

/// Dirichlet draw by Gamma normalisation; output sums to 1 exactly up to
/// rounding.
pub fn sample_dirichlet<R: Rng>(concentrations: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if concentrations.is_empty() {
        return Err(Error::Numeric("Dirichlet needs at least one component".into()));
    }
    // With tiny concentrations all Gamma draws can underflow to ~0; retry.
    for _ in 0..100 {
        let mut draws = Vec::with_capacity(concentrations.len());
        for &c in concentrations {
            draws.push(sample_gamma(c, 1.0, rng)?);
        }
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            for d in &mut draws {
                *d /= total;
            }
            return Ok(draws);
        }
    }
    Err(Error::Numeric("Dirichlet sampling failed to normalise".into()))
}

/// Categorical draw from unnormalised log-weights (0-based index).
pub fn sample_categorical<R: Rng>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    if log_weights.is_empty() {
        return Err(Error::Numeric("categorical over empty support".into()));
    }
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::Numeric("categorical: all log-weights are -inf".into()));
    }
    let total: f64 = log_weights.iter().map(|&w| (w - max).exp()).sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in log_weights.iter().enumerate() {
        acc += (w - max).exp();
        if u < acc {
            return Ok(i);
        }
    }
    Ok(log_weights.len() - 1)
}

pub fn sample_poisson<R: Rng>(lambda: f64, rng: &mut R) -> Result<u32> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Numeric(format!("Poisson rate must be positive, got {lambda}")));
    }
    if lambda > 1e9 {
        return Err(Error::Numeric(format!("Poisson rate {lambda} too large; generator diverged")));
    }
    let dist = rand_distr::Poisson::new(lambda)
        .map_err(|e| Error::Numeric(format!("Poisson({lambda}): {e}")))?;
    let draw: f64 = dist.sample(rng);
    Ok(draw as u32)
}
