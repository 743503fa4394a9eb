//! Bayesian Poisson autoregressive baseline: log-link GLM on log-shifted
//! lagged counts, with IRLS maximum likelihood for AIC/BIC order selection
//! and adaptive random-walk Metropolis for the posterior.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CountSeries;
use crate::dist::{ln_factorial, poisson_log_pmf_unchecked};
use crate::error::{Error, Result};

/// Default MCMC sizes for the baseline posterior.
pub const DEFAULT_PAR_BURNIN: usize = 5000;
pub const DEFAULT_PAR_ITERS: usize = 10000;

/// Prior precisions of the normal coefficient priors. The headline values
/// are precisions, not variances: `beta_0 ~ N(0, precision 1e-6)` is the
/// diffuse prior with variance 1e6 (the convention of the Gibbs tool the
/// baseline replicates; a variance of 1e-6 would pin every coefficient at
/// zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParPrior {
    pub intercept_precision: f64,
    pub slope_precision: f64,
}

impl Default for ParPrior {
    fn default() -> Self {
        ParPrior { intercept_precision: 1e-6, slope_precision: 1e-4 }
    }
}

/// Order selection criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Aic,
    Bic,
}

impl std::str::FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(Criterion::Aic),
            "bic" => Ok(Criterion::Bic),
            other => Err(Error::Config(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Covariate layout: intercept, own-series log-shifted lags `1..=q`, and
/// for the multivariate form one raw lag-1 term per other series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParDesign {
    pub target: usize,
    pub q: usize,
    pub cross_series: Vec<usize>,
}

impl ParDesign {
    pub fn univariate(q: usize) -> Self {
        ParDesign { target: 0, q, cross_series: Vec::new() }
    }

    pub fn multivariate(target: usize, q: usize, num_series: usize) -> Self {
        ParDesign {
            target,
            q,
            cross_series: (0..num_series).filter(|&m| m != target).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        1 + self.q + self.cross_series.len()
    }

    /// Earliest target index with a full covariate history.
    pub fn min_target(&self) -> usize {
        self.q.max(if self.cross_series.is_empty() { 0 } else { 1 })
    }

    pub fn coef_names(&self) -> Vec<String> {
        let mut names = vec!["beta0".to_string()];
        names.extend((1..=self.q).map(|i| format!("beta{i}")));
        names.extend(self.cross_series.iter().map(|m| format!("zeta{}", m + 1)));
        names
    }

    /// Covariate row for target time `t` (0-based, `t >= min_target`).
    pub fn covariates(&self, series: &CountSeries, t: usize) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.num_params());
        row.push(1.0);
        for i in 1..=self.q {
            row.push((series.value(self.target, t - i) as f64 + 1.0).ln());
        }
        for &m in &self.cross_series {
            row.push(series.value(m, t - 1) as f64);
        }
        row
    }

    pub fn log_rate(&self, beta: &[f64], series: &CountSeries, t: usize) -> f64 {
        self.covariates(series, t)
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum()
    }
}

/// Transition pmf `PD(y; exp(eta_t))` of one coefficient draw given the
/// true history up to `t`.
pub fn par_transition_pmf(
    design: &ParDesign,
    beta: &[f64],
    series: &CountSeries,
    t: usize,
    y: u32,
) -> Result<f64> {
    if beta.len() != design.num_params() {
        return Err(Error::Schema(format!(
            "{} coefficients for a {}-parameter design",
            beta.len(),
            design.num_params()
        )));
    }
    let eta = design.log_rate(beta, series, t);
    let lambda = eta.exp();
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Ok(0.0);
    }
    Ok(poisson_log_pmf_unchecked(y, lambda).exp())
}

/// IRLS maximum-likelihood fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MleFit {
    pub beta: Vec<f64>,
    pub log_lik: f64,
    pub converged: bool,
    /// Set when any coefficient runs past 50 in magnitude, the
    /// perfect-separation-style failure mode.
    pub diverged: bool,
    pub iters: usize,
}

struct Glm {
    x: DMatrix<f64>,
    y: DVector<f64>,
    ln_fact: f64,
}

impl Glm {
    fn build(series: &CountSeries, design: &ParDesign, window: std::ops::Range<usize>) -> Result<Self> {
        if window.start < design.min_target() {
            return Err(Error::Schema(format!(
                "window starts at {} but the design needs history of {}",
                window.start,
                design.min_target()
            )));
        }
        if window.end > series.len() {
            return Err(Error::Schema("window exceeds series length".into()));
        }
        let n = window.len();
        let p = design.num_params();
        if n <= p {
            return Err(Error::Schema(format!(
                "window of {n} points cannot identify {p} parameters"
            )));
        }
        let mut x = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        let mut ln_fact = 0.0;
        for (row, t) in window.enumerate() {
            for (col, v) in design.covariates(series, t).into_iter().enumerate() {
                x[(row, col)] = v;
            }
            let count = series.value(design.target, t);
            y[row] = count as f64;
            ln_fact += ln_factorial(count);
        }
        Ok(Glm { x, y, ln_fact })
    }

    /// Poisson log-likelihood at `beta`, including the `ln(y!)` mass so
    /// values are comparable across implementations.
    fn log_lik(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.x * beta;
        let mut ll = -self.ln_fact;
        for i in 0..eta.len() {
            ll += self.y[i] * eta[i] - eta[i].exp();
        }
        ll
    }

    #[cfg(test)]
    fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.x * beta;
        let resid = DVector::from_fn(eta.len(), |i, _| self.y[i] - eta[i].exp());
        self.x.transpose() * resid
    }

    /// `X^T W X` at `beta` with `W = diag(exp(eta))`, optionally ridged.
    fn curvature(&self, beta: &DVector<f64>, ridge: &[f64]) -> DMatrix<f64> {
        let eta = &self.x * beta;
        let p = self.x.ncols();
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..self.x.nrows() {
            let w = eta[i].clamp(-30.0, 30.0).exp();
            for a in 0..p {
                for b in a..p {
                    xtwx[(a, b)] += w * self.x[(i, a)] * self.x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
            xtwx[(a, a)] += ridge.get(a).copied().unwrap_or(0.0);
        }
        xtwx
    }
}

fn irls(glm: &Glm) -> Result<MleFit> {
    let n = glm.x.nrows();
    let p = glm.x.ncols();
    let mean_y = glm.y.sum() / n as f64;
    let mut beta = DVector::zeros(p);
    beta[0] = (mean_y.max(1e-3)).ln();
    let mut ll = glm.log_lik(&beta);
    let mut converged = false;
    let mut iters = 0;
    for iter in 1..=100 {
        iters = iter;
        let eta = &glm.x * &beta;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut xtwz = DVector::zeros(p);
        for i in 0..n {
            let e = eta[i].clamp(-30.0, 30.0);
            let w = e.exp().max(1e-10);
            let z = e + (glm.y[i] - w) / w;
            for a in 0..p {
                xtwz[a] += w * glm.x[(i, a)] * z;
                for b in a..p {
                    xtwx[(a, b)] += w * glm.x[(i, a)] * glm.x[(i, b)];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let chol = match Cholesky::new(xtwx.clone()) {
            Some(c) => c,
            None => {
                let mut ridged = xtwx;
                for a in 0..p {
                    ridged[(a, a)] += 1e-8;
                }
                Cholesky::new(ridged)
                    .ok_or_else(|| Error::Numeric("IRLS normal equations are singular".into()))?
            }
        };
        let next = chol.solve(&xtwz);
        let next_ll = glm.log_lik(&next);
        let delta = (next_ll - ll).abs() / (ll.abs() + 1.0);
        beta = next;
        ll = next_ll;
        if delta < 1e-10 {
            converged = true;
            break;
        }
    }
    let diverged = beta.iter().any(|b| b.abs() > 50.0);
    Ok(MleFit { beta: beta.iter().copied().collect(), log_lik: ll, converged, diverged, iters })
}

/// Maximum-likelihood fit of the design on `series[window]` (targets with
/// full history). Non-convergence is reported on the result, not an error.
pub fn fit_mle(
    series: &CountSeries,
    design: &ParDesign,
    window: std::ops::Range<usize>,
) -> Result<MleFit> {
    let glm = Glm::build(series, design, window)?;
    irls(&glm)
}

/// Log-likelihood of arbitrary coefficients over the same window, for
/// optimality checks.
pub fn log_lik_at(
    series: &CountSeries,
    design: &ParDesign,
    window: std::ops::Range<usize>,
    beta: &[f64],
) -> Result<f64> {
    let glm = Glm::build(series, design, window)?;
    Ok(glm.log_lik(&DVector::from_row_slice(beta)))
}

/// One candidate order's selection scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderScore {
    pub q: usize,
    pub log_lik: f64,
    pub aic: f64,
    pub bic: f64,
    pub converged: bool,
}

/// Fits every order `1..=q_max` on an identical conditioning window (all
/// candidates condition on the first `q_max` usable points, otherwise the
/// criteria are incomparable) and returns the argmin order plus the table.
pub fn select_order(
    series: &CountSeries,
    target: usize,
    q_max: usize,
    cross: bool,
    criterion: Criterion,
    train_len: usize,
) -> Result<(usize, Vec<OrderScore>)> {
    if q_max < 1 {
        return Err(Error::Config("q_max must be >= 1".into()));
    }
    if train_len > series.len() {
        return Err(Error::Schema("training window exceeds series".into()));
    }
    let mut scores = Vec::with_capacity(q_max);
    let mut best: Option<(f64, usize)> = None;
    for q in 1..=q_max {
        let design = if cross {
            ParDesign::multivariate(target, q, series.num_series())
        } else {
            ParDesign { target, q, cross_series: Vec::new() }
        };
        let window = q_max.max(design.min_target())..train_len;
        let n = window.len() as f64;
        let fit = fit_mle(series, &design, window)?;
        let p = design.num_params() as f64;
        let aic = 2.0 * p - 2.0 * fit.log_lik;
        let bic = p * n.ln() - 2.0 * fit.log_lik;
        let score = match criterion {
            Criterion::Aic => aic,
            Criterion::Bic => bic,
        };
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, q));
        }
        scores.push(OrderScore { q, log_lik: fit.log_lik, aic, bic, converged: fit.converged });
    }
    Ok((best.expect("q_max >= 1").1, scores))
}

/// Posterior draws of the coefficient vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParDraws {
    pub design: ParDesign,
    pub beta: Vec<Vec<f64>>,
    pub acceptance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ParDraws {
    /// Coefficient summary rows `(name, posterior mean, posterior sd)`.
    pub fn summary(&self) -> Vec<(String, f64, f64)> {
        let names = self.design.coef_names();
        let n = self.beta.len() as f64;
        names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let mean = self.beta.iter().map(|b| b[j]).sum::<f64>() / n;
                let var = if self.beta.len() > 1 {
                    self.beta.iter().map(|b| (b[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (name, mean, var.sqrt())
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("coefficient,posterior_mean,posterior_sd\n");
        for (name, mean, sd) in self.summary() {
            out.push_str(&format!("{name},{mean},{sd}\n"));
        }
        out
    }
}

fn log_posterior(glm: &Glm, prior: &ParPrior, beta: &DVector<f64>) -> f64 {
    let mut lp = glm.log_lik(beta);
    lp -= 0.5 * prior.intercept_precision * beta[0] * beta[0];
    for j in 1..beta.len() {
        lp -= 0.5 * prior.slope_precision * beta[j] * beta[j];
    }
    lp
}

/// Adaptive random-walk Metropolis on the joint coefficient vector,
/// initialised at the MLE with proposal covariance from the posterior
/// curvature there. The step scale adapts toward a 0.234 acceptance rate
/// during burn-in and is frozen afterwards.
pub fn mh_chain<R: Rng>(
    series: &CountSeries,
    design: &ParDesign,
    train_len: usize,
    prior: &ParPrior,
    burnin: usize,
    iters: usize,
    rng: &mut R,
) -> Result<ParDraws> {
    let glm = Glm::build(series, design, design.min_target()..train_len)?;
    let p = design.num_params();
    let mle = irls(&glm)?;
    let mut warnings = Vec::new();
    if !mle.converged {
        warnings.push("IRLS did not converge; starting from its best iterate".into());
    }
    if mle.diverged {
        warnings.push("IRLS iterate diverged (|beta| > 50); posterior relies on the prior".into());
    }
    let start: Vec<f64> = if mle.diverged { vec![0.0; p] } else { mle.beta.clone() };
    let mut beta = DVector::from_row_slice(&start);

    // proposal covariance = inverse posterior curvature at the start
    let mut ridge = vec![prior.slope_precision; p];
    ridge[0] = prior.intercept_precision;
    let curv = glm.curvature(&beta, &ridge);
    let chol_prec = Cholesky::new(curv)
        .ok_or_else(|| Error::Numeric("posterior curvature is not positive definite".into()))?;
    // step = scale * L^{-T} z gives covariance scale^2 * (X^T W X + P0)^{-1}
    let l_t = chol_prec.l().transpose();

    let mut scale = 2.38 / (p as f64).sqrt();
    let mut lp = log_posterior(&glm, prior, &beta);
    let mut draws = Vec::with_capacity(iters);
    let mut accepted_post = 0u64;
    let mut accepted_window = 0u64;
    for iter in 0..burnin + iters {
        let z = DVector::from_fn(p, |_, _| {
            // Box-Muller from two uniforms
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let step = l_t
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::Numeric("proposal factor is singular".into()))?;
        let candidate = &beta + step * scale;
        let cand_lp = log_posterior(&glm, prior, &candidate);
        let accept = cand_lp - lp >= 0.0 || rng.random::<f64>().ln() < cand_lp - lp;
        if accept {
            beta = candidate;
            lp = cand_lp;
            accepted_window += 1;
            if iter >= burnin {
                accepted_post += 1;
            }
        }
        if iter < burnin && (iter + 1) % 50 == 0 {
            let rate = accepted_window as f64 / 50.0;
            scale = (scale * ((rate - 0.234) as f64).exp()).clamp(1e-3, 10.0);
            accepted_window = 0;
        }
        if iter == burnin {
            accepted_window = 0;
        }
        if iter >= burnin {
            draws.push(beta.iter().copied().collect());
        }
    }
    let acceptance = accepted_post as f64 / iters as f64;
    if !(0.05..=0.6).contains(&acceptance) {
        warnings.push(format!("acceptance rate {acceptance:.3} outside [0.05, 0.6]"));
    }
    Ok(ParDraws { design: design.clone(), beta: draws, acceptance, warnings })
}
