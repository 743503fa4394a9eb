//! Pre-training step: fit a finite Poisson mixture by Gibbs sampling and
//! derive the deterministic count -> label rule that makes unseen counts
//! predictable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CountSeries, DataSplit};
use crate::dist::{sample_categorical, sample_dirichlet, sample_gamma};
use crate::error::{Error, Result};

/// Default MCMC sizes for the pre-training mixture fit.
pub const DEFAULT_MIXTURE_BURNIN: usize = 2000;
pub const DEFAULT_MIXTURE_ITERS: usize = 5000;

/// One retained sweep of the mixture chain, components sorted by rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureTrace {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

/// Fitted finite Poisson mixture: posterior-mean weights and rates in
/// canonical (increasing-rate) order, plus the per-sweep trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureFit {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<MixtureTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MixtureFit {
    pub fn num_components(&self) -> usize {
        self.rates.len()
    }

    pub fn label_rule(&self) -> LabelRule {
        LabelRule { rates: self.rates.clone() }
    }

    /// Trace export rows `(iter, component, weight, rate)`, 1-based
    /// component indices.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,i,w_i,mu_i\n");
        for (iter, row) in self.trace.iter().enumerate() {
            for i in 0..row.rates.len() {
                out.push_str(&format!("{},{},{},{}\n", iter + 1, i + 1, row.weights[i], row.rates[i]));
            }
        }
        out
    }
}

/// Deterministic map from any count to its most likely mixture component
/// (0-based), ties broken toward the lower index. Total: defined for every
/// count, observed or not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub rates: Vec<f64>,
}

impl LabelRule {
    pub fn num_labels(&self) -> usize {
        self.rates.len()
    }

    /// `argmax_i PD(y; mu_i)`; the `ln(y!)` term is shared so only
    /// `y ln(mu) - mu` is compared.
    pub fn label(&self, y: u32) -> usize {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, &mu) in self.rates.iter().enumerate() {
            let score = y as f64 * mu.ln() - mu;
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        best
    }

    /// Labels an entire series (0-based component per time point).
    pub fn label_series(&self, series: &[u32]) -> Vec<u16> {
        series.iter().map(|&y| self.label(y) as u16).collect()
    }
}

/// `label_count` as a free operation on a fitted mixture (0-based).
pub fn label_count(y: u32, fit: &MixtureFit) -> usize {
    fit.label_rule().label(y)
}

/// Labels the full series with `fit`'s rule; callers slice out the
/// training/test window they need. Labels exist for every index, which is
/// what makes test-time contexts total.
pub fn label_series(series: &[u32], fit: &MixtureFit, _split: &DataSplit) -> Vec<u16> {
    fit.label_rule().label_series(series)
}

/// Fits a `c`-component Poisson mixture to the pre-training counts by the
/// three-step Gibbs cycle under `mu_i ~ Gamma(1,1)`, `w ~ Dirichlet(1,..,1)`
/// priors.
///
/// The live chain is never reordered; retained sweeps are copied, sorted by
/// rate and accumulated, which keeps posterior means meaningful under label
/// switching while the chain itself remains a valid Gibbs kernel.
pub fn fit_mixture<R: Rng>(
    pre_training: &[u32],
    c: usize,
    burnin: usize,
    iters: usize,
    rng: &mut R,
) -> Result<MixtureFit> {
    if pre_training.is_empty() {
        return Err(Error::Schema("pre-training segment is empty".into()));
    }
    if c < 1 || c > 255 {
        return Err(Error::Config(format!("component count {c} not in [1, 255]")));
    }
    if iters < 1 {
        return Err(Error::Config("need at least one retained iteration".into()));
    }

    let mut warnings = Vec::new();
    let distinct = {
        let mut vals: Vec<u32> = pre_training.to_vec();
        vals.sort_unstable();
        vals.dedup();
        vals.len()
    };
    if c > distinct {
        warnings.push(format!(
            "c={c} exceeds the {distinct} distinct observed counts; surplus components draw from the prior"
        ));
    }

    let mut chain = MixtureChain::init(pre_training, c, rng)?;

    let mut trace = Vec::with_capacity(iters);
    let mut weight_sum = vec![0.0; c];
    let mut rate_sum = vec![0.0; c];
    for sweep in 0..burnin + iters {
        chain.sweep(rng)?;
        if sweep >= burnin {
            let snapshot = chain.sorted_snapshot();
            for i in 0..c {
                weight_sum[i] += snapshot.weights[i];
                rate_sum[i] += snapshot.rates[i];
            }
            trace.push(snapshot);
        }
    }

    let n = iters as f64;
    Ok(MixtureFit {
        weights: weight_sum.iter().map(|w| w / n).collect(),
        rates: rate_sum.iter().map(|r| r / n).collect(),
        trace,
        warnings,
    })
}

/// Live mixture Gibbs state (unsorted).
struct MixtureChain<'a> {
    y: &'a [u32],
    weights: Vec<f64>,
    rates: Vec<f64>,
    labels: Vec<u8>,
}

impl<'a> MixtureChain<'a> {
    fn init<R: Rng>(y: &'a [u32], c: usize, rng: &mut R) -> Result<Self> {
        let weights = sample_dirichlet(&vec![1.0; c], rng)?;
        let rates: Vec<f64> = (0..c)
            .map(|_| sample_gamma(1.0, 1.0, rng))
            .collect::<Result<_>>()?;
        Ok(MixtureChain { y, weights, rates, labels: vec![0; y.len()] })
    }

    /// One cycle: labels, then weights, then rates.
    fn sweep<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let c = self.rates.len();
        let ln_w: Vec<f64> = self.weights.iter().map(|w| w.ln()).collect();
        let ln_mu: Vec<f64> = self.rates.iter().map(|m| m.ln()).collect();

        let mut counts = vec![0u64; c];
        let mut sums = vec![0u64; c];
        let mut log_weights = vec![0.0; c];
        for (t, &yt) in self.y.iter().enumerate() {
            for i in 0..c {
                log_weights[i] = ln_w[i] + yt as f64 * ln_mu[i] - self.rates[i];
            }
            let label = sample_categorical(&log_weights, rng)?;
            self.labels[t] = label as u8;
            counts[label] += 1;
            sums[label] += yt as u64;
        }

        let conc: Vec<f64> = counts.iter().map(|&n| 1.0 + n as f64).collect();
        self.weights = sample_dirichlet(&conc, rng)?;
        for i in 0..c {
            self.rates[i] = sample_gamma(1.0 + sums[i] as f64, 1.0 + counts[i] as f64, rng)?;
        }
        Ok(())
    }

    fn sorted_snapshot(&self) -> MixtureTrace {
        let mut order: Vec<usize> = (0..self.rates.len()).collect();
        order.sort_by(|&a, &b| self.rates[a].total_cmp(&self.rates[b]));
        MixtureTrace {
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            rates: order.iter().map(|&i| self.rates[i]).collect(),
        }
    }
}

/// Mechanised version of the paper-style visual trimming: drop components
/// below `min_weight`, merge runs of components whose rates are within
/// `rate_merge_tol` (relative) of the running weight-averaged rate, then
/// renormalise. At worst returns the input unchanged.
pub fn select_components(fit: &MixtureFit, min_weight: f64, rate_merge_tol: f64) -> MixtureFit {
    let mut kept: Vec<(f64, f64)> = fit
        .weights
        .iter()
        .zip(&fit.rates)
        .filter(|(&w, _)| w >= min_weight)
        .map(|(&w, &r)| (w, r))
        .collect();
    if kept.is_empty() {
        // keep the single heaviest component
        let best = fit
            .weights
            .iter()
            .zip(&fit.rates)
            .max_by(|a, b| a.0.total_cmp(b.0))
            .map(|(&w, &r)| (w, r));
        kept.extend(best);
    }
    kept.sort_by(|a, b| a.1.total_cmp(&b.1));

    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(kept.len());
    for (w, r) in kept {
        match merged.last_mut() {
            Some((gw, gr)) if r > 0.0 && (r - *gr) / r < rate_merge_tol => {
                *gr = (*gw * *gr + w * r) / (*gw + w);
                *gw += w;
            }
            _ => merged.push((w, r)),
        }
    }

    let total: f64 = merged.iter().map(|(w, _)| w).sum();
    let mut warnings = fit.warnings.clone();
    if merged.len() < fit.num_components() {
        warnings.push(format!(
            "reduced {} components to {}",
            fit.num_components(),
            merged.len()
        ));
    }
    MixtureFit {
        weights: merged.iter().map(|(w, _)| w / total).collect(),
        rates: merged.iter().map(|&(_, r)| r).collect(),
        trace: Vec::new(),
        warnings,
    }
}

/// Fits one mixture per series on the pre-training segment; the per-series
/// label alphabets are independent. Reduction is applied separately so the
/// full exploration trace is preserved for export.
pub fn fit_per_series<R: Rng>(
    series: &CountSeries,
    split: &DataSplit,
    c: usize,
    burnin: usize,
    iters: usize,
    rng: &mut R,
) -> Result<Vec<MixtureFit>> {
    split.check_series(series)?;
    let mut fits = Vec::with_capacity(series.num_series());
    for m in 0..series.num_series() {
        let pre = &series.series(m)[split.pre_training()];
        fits.push(fit_mixture(pre, c, burnin, iters, rng)?);
    }
    Ok(fits)
}
