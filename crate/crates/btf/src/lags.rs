//! Stochastic-search selection of important lags: split/merge
//! Metropolis-Hastings over per-predictor cluster counts `k_j` and hard
//! partitions of the label levels, scored by the Gamma-marginalised
//! likelihood.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CellSpace;
use crate::dist::{lgamma, ln_factorial, log_sum_exp};
use crate::error::{Error, Result};
use crate::mixture::LabelRule;

/// Default MCMC sizes for the lag search.
pub const DEFAULT_LAG_BURNIN: usize = 1000;
pub const DEFAULT_LAG_ITERS: usize = 2000;

/// One predictor of the transition law: lag `lag` of series `series`,
/// whose labels take `levels` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictor {
    pub series: usize,
    pub lag: usize,
    pub levels: usize,
}

impl Predictor {
    pub fn display_name(&self, multivariate: bool) -> String {
        if multivariate {
            format!("s{}_lag{}", self.series + 1, self.lag)
        } else {
            format!("lag{}", self.lag)
        }
    }
}

/// Training targets plus the label of every lagged predictor, all 0-based.
///
/// `labels[p][i]` is the label level of predictor `p` at the i-th target;
/// predictors are ordered series-major (series 1 lags `1..=q`, series 2
/// lags `1..=q`, ...).
#[derive(Debug, Clone)]
pub struct Contexts {
    pub predictors: Vec<Predictor>,
    pub targets: Vec<u32>,
    pub labels: Vec<Vec<u16>>,
}

impl Contexts {
    pub fn new(predictors: Vec<Predictor>, targets: Vec<u32>, labels: Vec<Vec<u16>>) -> Result<Self> {
        if predictors.is_empty() {
            return Err(Error::Schema("contexts need at least one predictor".into()));
        }
        if labels.len() != predictors.len() {
            return Err(Error::Schema("one label row per predictor required".into()));
        }
        for (p, row) in labels.iter().enumerate() {
            if row.len() != targets.len() {
                return Err(Error::Schema(format!(
                    "predictor {p}: {} labels for {} targets",
                    row.len(),
                    targets.len()
                )));
            }
            if row.iter().any(|&l| l as usize >= predictors[p].levels) {
                return Err(Error::Schema(format!(
                    "predictor {p}: label out of range [0, {})",
                    predictors[p].levels
                )));
            }
        }
        Ok(Contexts { predictors, targets, labels })
    }

    /// Builds the training contexts for `target_series` from fully labelled
    /// series: the target at time `t` is predicted from the labels of
    /// `y_{m, t-j}` for every series `m` and lag `j in 1..=q`.
    pub fn training(
        series: &crate::data::CountSeries,
        split: &crate::data::DataSplit,
        rules: &[LabelRule],
        target_series: usize,
    ) -> Result<Self> {
        split.check_series(series)?;
        if rules.len() != series.num_series() {
            return Err(Error::Schema(format!(
                "{} label rules for {} series",
                rules.len(),
                series.num_series()
            )));
        }
        if target_series >= series.num_series() {
            return Err(Error::Schema(format!("target series {target_series} out of range")));
        }
        let q = split.max_lag;
        let all_labels: Vec<Vec<u16>> = (0..series.num_series())
            .map(|m| rules[m].label_series(series.series(m)))
            .collect();

        let window = split.training_targets();
        let targets: Vec<u32> = window.clone().map(|t| series.value(target_series, t)).collect();
        let mut predictors = Vec::new();
        let mut labels = Vec::new();
        for m in 0..series.num_series() {
            for lag in 1..=q {
                predictors.push(Predictor { series: m, lag, levels: rules[m].num_labels() });
                labels.push(window.clone().map(|t| all_labels[m][t - lag]).collect());
            }
        }
        Contexts::new(predictors, targets, labels)
    }

    pub fn num_points(&self) -> usize {
        self.targets.len()
    }

    pub fn num_predictors(&self) -> usize {
        self.predictors.len()
    }
}

/// Hard grouping of one predictor's label levels into `k` nonempty
/// clusters, kept in canonical form (clusters numbered by first appearance
/// over levels).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    assign: Vec<u8>,
    k: u8,
}

impl Partition {
    /// All levels in one cluster (`k = 1`, the "unimportant" state).
    pub fn single(levels: usize) -> Self {
        assert!(levels >= 1 && levels <= 255);
        Partition { assign: vec![0; levels], k: 1 }
    }

    /// Builds from an arbitrary level -> cluster map, renumbering clusters
    /// canonically so relabelled inputs compare equal.
    pub fn from_assign(assign: &[u8]) -> Result<Self> {
        if assign.is_empty() || assign.len() > 255 {
            return Err(Error::Schema("partition needs 1..=255 levels".into()));
        }
        let mut remap: Vec<Option<u8>> = vec![None; 256];
        let mut next = 0u8;
        let mut canonical = Vec::with_capacity(assign.len());
        for &a in assign {
            let id = match remap[a as usize] {
                Some(id) => id,
                None => {
                    let id = next;
                    remap[a as usize] = Some(id);
                    next += 1;
                    id
                }
            };
            canonical.push(id);
        }
        Ok(Partition { assign: canonical, k: next })
    }

    pub fn num_levels(&self) -> usize {
        self.assign.len()
    }

    pub fn num_clusters(&self) -> usize {
        self.k as usize
    }

    pub fn cluster_of(&self, level: usize) -> u8 {
        self.assign[level]
    }

    pub fn assign(&self) -> &[u8] {
        &self.assign
    }

    fn cluster_sizes(&self) -> Vec<u32> {
        let mut sizes = vec![0u32; self.k as usize];
        for &a in &self.assign {
            sizes[a as usize] += 1;
        }
        sizes
    }

    fn splittable_clusters(&self) -> Vec<u8> {
        self.cluster_sizes()
            .iter()
            .enumerate()
            .filter(|(_, &s)| s >= 2)
            .map(|(i, _)| i as u8)
            .collect()
    }
}

/// ln of the number of unordered nonempty bipartitions of a size-`s` set,
/// `2^(s-1) - 1`.
fn ln_bipartitions(s: u32) -> f64 {
    debug_assert!(s >= 2);
    if s <= 60 {
        (((1u64 << (s - 1)) - 1) as f64).ln()
    } else {
        (s - 1) as f64 * std::f64::consts::LN_2
    }
}

fn ln_pairs(k: u32) -> f64 {
    ((k as u64 * (k as u64 - 1) / 2) as f64).ln()
}

/// Probability of proposing an "up" (split) move at state `k` of `c`
/// levels: forced at the lower boundary, a coin flip in the interior.
fn p_up(k: usize, c: usize) -> f64 {
    debug_assert!(k < c);
    if k == 1 {
        1.0
    } else {
        0.5
    }
}

fn p_down(k: usize, c: usize) -> f64 {
    debug_assert!(k >= 2);
    if k == c {
        1.0
    } else {
        0.5
    }
}

/// Hastings correction `ln q(reverse) - ln q(forward)` for a split of a
/// size-`split_size` cluster when the state had `k_before` clusters of
/// which `splittable_before` could be split.
pub fn log_split_proposal_ratio(
    c: usize,
    k_before: usize,
    splittable_before: usize,
    split_size: u32,
) -> f64 {
    let fwd = p_up(k_before, c).ln()
        - (splittable_before as f64).ln()
        - ln_bipartitions(split_size);
    let rev = p_down(k_before + 1, c).ln() - ln_pairs(k_before as u32 + 1);
    rev - fwd
}

/// Hastings correction for merging two clusters of combined size
/// `merged_size` when the state had `k_before` clusters;
/// `splittable_after` counts size >= 2 clusters in the merged state.
pub fn log_merge_proposal_ratio(
    c: usize,
    k_before: usize,
    merged_size: u32,
    splittable_after: usize,
) -> f64 {
    let fwd = p_down(k_before, c).ln() - ln_pairs(k_before as u32);
    let rev = p_up(k_before - 1, c).ln()
        - (splittable_after as f64).ln()
        - ln_bipartitions(merged_size);
    rev - fwd
}

/// Splits a uniformly chosen size >= 2 cluster along a uniform nonempty
/// unordered bipartition. Returns the new partition and the Hastings
/// correction. Errors if no cluster can be split (`k = c`).
pub fn propose_split<R: Rng>(part: &Partition, rng: &mut R) -> Result<(Partition, f64)> {
    let c = part.num_levels();
    let k = part.num_clusters();
    let splittable = part.splittable_clusters();
    if splittable.is_empty() {
        return Err(Error::Numeric("no splittable cluster".into()));
    }
    let cluster = splittable[rng.random_range(0..splittable.len())];
    let members: Vec<usize> = (0..c).filter(|&l| part.assign[l] == cluster).collect();
    let s = members.len();
    // uniform over unordered nonempty bipartitions: random bits, rejecting
    // the two degenerate patterns (each unordered pair is hit twice)
    let subset = loop {
        let bits: Vec<bool> = (0..s).map(|_| rng.random::<bool>()).collect();
        let ones = bits.iter().filter(|&&b| b).count();
        if ones > 0 && ones < s {
            break bits;
        }
    };
    let mut assign = part.assign.clone();
    for (i, &level) in members.iter().enumerate() {
        if subset[i] {
            assign[level] = part.k; // provisional id, canonicalised below
        }
    }
    let new = Partition::from_assign(&assign)?;
    let ratio = log_split_proposal_ratio(c, k, splittable.len(), s as u32);
    Ok((new, ratio))
}

/// Merges a uniformly chosen unordered pair of clusters. Errors if `k = 1`.
pub fn propose_merge<R: Rng>(part: &Partition, rng: &mut R) -> Result<(Partition, f64)> {
    let c = part.num_levels();
    let k = part.num_clusters();
    if k < 2 {
        return Err(Error::Numeric("nothing to merge".into()));
    }
    let i = rng.random_range(0..k);
    let j = {
        let j = rng.random_range(0..k - 1);
        if j >= i {
            j + 1
        } else {
            j
        }
    };
    let (lo, hi) = (i.min(j) as u8, i.max(j) as u8);
    let mut assign = part.assign.clone();
    let mut merged_size = 0u32;
    for a in &mut assign {
        if *a == hi {
            *a = lo;
        }
        if *a == lo {
            merged_size += 1;
        }
    }
    let new = Partition::from_assign(&assign)?;
    let ratio = log_merge_proposal_ratio(c, k, merged_size, new.splittable_clusters().len());
    Ok((new, ratio))
}

/// Per-cell sufficient statistics of the training targets: visit count
/// `n_H`, count sum `S_H` and the log-factorial mass of the cell's
/// observations. Only occupied cells are stored; empty cells contribute
/// nothing to the marginal likelihood.
#[derive(Debug, Clone, Default)]
pub struct CellStats {
    pub cells: BTreeMap<u64, CellAgg>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CellAgg {
    pub n: u64,
    pub s: u64,
    pub ln_fact: f64,
}

/// Bins every training target into its partition-induced cell.
///
/// Postconditions: `sum n_H` equals the number of targets and `sum S_H`
/// the total count.
pub fn cell_statistics(
    ctx: &Contexts,
    partitions: &[Partition],
    cell_cap: u64,
) -> Result<(CellSpace, CellStats)> {
    if partitions.len() != ctx.num_predictors() {
        return Err(Error::Schema("one partition per predictor required".into()));
    }
    let radices: Vec<u32> = partitions.iter().map(|p| p.num_clusters() as u32).collect();
    let space = CellSpace::new(radices, cell_cap)?;
    let strides: Vec<u64> = (0..partitions.len()).map(|j| space.stride(j)).collect();

    let mut stats = CellStats::default();
    for i in 0..ctx.num_points() {
        let mut key = 0u64;
        for (p, part) in partitions.iter().enumerate() {
            key += part.cluster_of(ctx.labels[p][i] as usize) as u64 * strides[p];
        }
        let y = ctx.targets[i];
        let agg = stats.cells.entry(key).or_default();
        agg.n += 1;
        agg.s += y as u64;
        agg.ln_fact += ln_factorial(y);
    }
    Ok((space, stats))
}

/// Gamma-Poisson marginal log-likelihood summed over occupied cells:
/// `a ln b - lnG(a) - sum ln(y!) + lnG(a + S_H) - (a + S_H) ln(n_H + b)`
/// per cell, entirely in log space.
pub fn log_marginal_stats(stats: &CellStats, a: f64, b: f64) -> f64 {
    let base = a * b.ln() - lgamma(a);
    stats
        .cells
        .values()
        .map(|agg| {
            base + lgamma(a + agg.s as f64) - (a + agg.s as f64) * (agg.n as f64 + b).ln()
                - agg.ln_fact
        })
        .sum()
}

/// Convenience wrapper: bin then score.
pub fn log_marginal(
    ctx: &Contexts,
    partitions: &[Partition],
    a: f64,
    b: f64,
    cell_cap: u64,
) -> Result<f64> {
    let (_, stats) = cell_statistics(ctx, partitions, cell_cap)?;
    Ok(log_marginal_stats(&stats, a, b))
}

/// ln S2(n, k), Stirling numbers of the second kind, for `k in 0..=n`.
fn ln_stirling2_row(n: usize) -> Vec<f64> {
    let mut row = vec![f64::NEG_INFINITY; n + 1];
    row[0] = 0.0; // S(0,0) = 1
    for _ in 1..=n {
        let mut next = vec![f64::NEG_INFINITY; n + 1];
        for k in 1..=n {
            let carry = if row[k] > f64::NEG_INFINITY {
                (k as f64).ln() + row[k]
            } else {
                f64::NEG_INFINITY
            };
            next[k] = log_sum_exp(&[carry, row[k - 1]]).unwrap();
        }
        row = next;
    }
    row
}

/// Log-prior of one predictor's `(k, C)` state: `p(k) ∝ exp(-phi*lag*k)`
/// with a uniform law over the `S2(c, k)` partitions given `k`. The
/// Stirling term is what makes the chain's marginal over `k` match the
/// exponential prior exactly.
fn log_partition_prior(phi: f64, lag: usize, k: usize, ln_s2: &[f64]) -> f64 {
    -phi * lag as f64 * k as f64 - ln_s2[k]
}

/// Options for the split/merge search. `a` and `b` are the resolved
/// Gamma-prior parameters of the cell rates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LagSearchOptions {
    pub burnin: usize,
    pub iters: usize,
    pub phi: f64,
    pub a: f64,
    pub b: f64,
    pub cell_cap: u64,
}

/// Post-burn-in trace of `K` plus acceptance diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KTrace {
    /// `k_history[iter][predictor]`.
    pub k_history: Vec<Vec<u8>>,
    pub proposed_splits: u64,
    pub accepted_splits: u64,
    pub proposed_merges: u64,
    pub accepted_merges: u64,
    /// Split proposals rejected outright because the resulting cell space
    /// would exceed `cell_cap`.
    pub rejected_by_cell_cap: u64,
}

impl KTrace {
    /// Fraction of retained iterations with `k_j > 1`.
    pub fn inclusion_proportion(&self, predictor: usize) -> f64 {
        if self.k_history.is_empty() {
            return 0.0;
        }
        let hits = self.k_history.iter().filter(|row| row[predictor] > 1).count();
        hits as f64 / self.k_history.len() as f64
    }

    /// Export rows `iter,j,k_j` (1-based iteration and predictor).
    pub fn k_csv(&self) -> String {
        let mut out = String::from("iter,j,k_j\n");
        for (it, row) in self.k_history.iter().enumerate() {
            for (j, &k) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", it + 1, j + 1, k));
            }
        }
        out
    }

    /// Inclusion-proportion summary feeding the lag-importance plots.
    pub fn inclusion_csv(&self, predictors: &[Predictor]) -> String {
        let multivariate = predictors.iter().any(|p| p.series > 0);
        let mut out = String::from("predictor,series,lag,inclusion_proportion\n");
        for (p, pred) in predictors.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                pred.display_name(multivariate),
                pred.series + 1,
                pred.lag,
                self.inclusion_proportion(p)
            ));
        }
        out
    }
}

/// Result of the search: the trace plus the modal `(K, C)` passed to the
/// main sampler.
#[derive(Debug, Clone)]
pub struct LagSelection {
    pub trace: KTrace,
    pub partitions: Vec<Partition>,
}

/// Sweeps every predictor once per iteration with split/merge proposals,
/// accepting by `min(1, exp(dll + dprior + dproposal))`. Returns the trace
/// and the modal partition: the most-visited `K` vector, then per
/// predictor the most-visited partition among iterations with that `k_j`.
pub fn sample_k<R: Rng>(
    ctx: &Contexts,
    opts: &LagSearchOptions,
    rng: &mut R,
) -> Result<LagSelection> {
    let p_count = ctx.num_predictors();
    let mut partitions: Vec<Partition> =
        ctx.predictors.iter().map(|p| Partition::single(p.levels)).collect();
    let ln_s2: Vec<Vec<f64>> =
        ctx.predictors.iter().map(|p| ln_stirling2_row(p.levels)).collect();

    let mut current_ll = log_marginal(ctx, &partitions, opts.a, opts.b, opts.cell_cap)?;
    let mut trace = KTrace {
        k_history: Vec::with_capacity(opts.iters),
        proposed_splits: 0,
        accepted_splits: 0,
        proposed_merges: 0,
        accepted_merges: 0,
        rejected_by_cell_cap: 0,
    };
    // canonical-assign visit counts per predictor, keyed (k, assign)
    let mut partition_counts: Vec<BTreeMap<(u8, Vec<u8>), u64>> = vec![BTreeMap::new(); p_count];
    let mut k_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();

    for iter in 0..opts.burnin + opts.iters {
        for p in 0..p_count {
            let c = ctx.predictors[p].levels;
            if c <= 1 {
                continue; // single-level predictor: k pinned to 1
            }
            let k = partitions[p].num_clusters();
            let go_up = if k == 1 {
                true
            } else if k == c {
                false
            } else {
                rng.random::<bool>()
            };

            let (candidate, log_prop_ratio) = if go_up {
                trace.proposed_splits += 1;
                propose_split(&partitions[p], rng)?
            } else {
                trace.proposed_merges += 1;
                propose_merge(&partitions[p], rng)?
            };

            let lag = ctx.predictors[p].lag;
            let log_prior_delta =
                log_partition_prior(opts.phi, lag, candidate.num_clusters(), &ln_s2[p])
                    - log_partition_prior(opts.phi, lag, k, &ln_s2[p]);

            let old = std::mem::replace(&mut partitions[p], candidate);
            let candidate_ll = match log_marginal(ctx, &partitions, opts.a, opts.b, opts.cell_cap)
            {
                Ok(ll) => ll,
                Err(Error::Numeric(_)) => {
                    // cell space over cap: reject outright
                    trace.rejected_by_cell_cap += 1;
                    partitions[p] = old;
                    continue;
                }
                Err(e) => return Err(e),
            };

            let log_alpha = candidate_ll - current_ll + log_prior_delta + log_prop_ratio;
            if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
                current_ll = candidate_ll;
                if go_up {
                    trace.accepted_splits += 1;
                } else {
                    trace.accepted_merges += 1;
                }
            } else {
                partitions[p] = old;
            }
        }

        if iter >= opts.burnin {
            let ks: Vec<u8> = partitions.iter().map(|p| p.num_clusters() as u8).collect();
            for (p, part) in partitions.iter().enumerate() {
                *partition_counts[p]
                    .entry((part.num_clusters() as u8, part.assign.clone()))
                    .or_insert(0) += 1;
            }
            *k_counts.entry(ks.clone()).or_insert(0) += 1;
            trace.k_history.push(ks);
        }
    }

    // modal K vector (ties resolved toward the lexicographically smallest,
    // which BTreeMap iteration order provides)
    let modal_k: Vec<u8> = k_counts
        .iter()
        .max_by_key(|(_, &count)| count)
        .map(|(k, _)| k.clone())
        .ok_or_else(|| Error::Config("lag search retained no iterations".into()))?;

    let mut selected = Vec::with_capacity(p_count);
    for (p, counts) in partition_counts.iter().enumerate() {
        let best = counts
            .iter()
            .filter(|((k, _), _)| *k == modal_k[p])
            .max_by_key(|(_, &count)| count)
            .map(|((_, assign), _)| assign.clone())
            .expect("modal k was observed");
        selected.push(Partition::from_assign(&best)?);
    }

    Ok(LagSelection { trace, partitions: selected })
}
