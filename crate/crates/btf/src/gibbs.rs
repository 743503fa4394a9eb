//! Main sampler: given fixed cluster counts, partitions and label contexts,
//! run the Gibbs cycle over allocations `z`, cell labels `Z*`, stick
//! fractions `V`, atom rates `lambda*` and mixture probabilities `pi^(j)`,
//! and evaluate one-step-ahead predictive quantities from the retained
//! draws.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CellSpace;
use crate::dist::{self, poisson_log_pmf_unchecked, stream_rng, SeedRng};
use crate::error::{Error, Result};
use crate::lags::{Contexts, Partition, Predictor};

/// Default MCMC sizes for the main sampler.
pub const DEFAULT_BTF_BURNIN: usize = 2000;
pub const DEFAULT_BTF_ITERS: usize = 5000;

/// Resolved hyperparameters of the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsHyper {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub alpha0: f64,
    pub l: usize,
}

/// Fixed problem definition: training targets, per-predictor label
/// contexts, the selected partitions (initialisation only) and the cell
/// space implied by the cluster counts.
#[derive(Debug, Clone)]
pub struct BtfModel {
    pub predictors: Vec<Predictor>,
    pub partitions: Vec<Partition>,
    pub cells: CellSpace,
    pub targets: Vec<u32>,
    pub labels: Vec<Vec<u16>>,
    pub hyper: GibbsHyper,
    /// Stable per-cell keys (order-independent tuple hashes) for the keyed
    /// variate source.
    tuple_keys: Vec<u64>,
}

fn fnv1a(chunks: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &c in chunks {
        for byte in c.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl BtfModel {
    pub fn new(
        ctx: &Contexts,
        partitions: &[Partition],
        hyper: GibbsHyper,
        cell_cap: u64,
    ) -> Result<Self> {
        if partitions.len() != ctx.num_predictors() {
            return Err(Error::Schema("one partition per predictor required".into()));
        }
        for (p, (part, pred)) in partitions.iter().zip(&ctx.predictors).enumerate() {
            if part.num_levels() != pred.levels {
                return Err(Error::Schema(format!(
                    "predictor {p}: partition over {} levels but alphabet has {}",
                    part.num_levels(),
                    pred.levels
                )));
            }
        }
        if hyper.l < 1 {
            return Err(Error::Config("stick truncation L must be >= 1".into()));
        }
        if ctx.targets.is_empty() {
            return Err(Error::Schema("no training targets".into()));
        }
        let radices: Vec<u32> = partitions.iter().map(|p| p.num_clusters() as u32).collect();
        let cells = CellSpace::new(radices, cell_cap)?;

        // order-independent cell keys: hash (predictor id, h_j) pairs sorted
        // by predictor id, so a reordered-predictor model assigns the same
        // key to the same logical cell
        let mut pred_ids: Vec<(u64, usize)> = ctx
            .predictors
            .iter()
            .enumerate()
            .map(|(p, pred)| (((pred.series as u64) << 32) | pred.lag as u64, p))
            .collect();
        pred_ids.sort_unstable();
        let mut tuple_keys = Vec::with_capacity(cells.size() as usize);
        for lin in 0..cells.size() {
            let tuple = cells.decode(lin)?;
            let chunks: Vec<u64> =
                pred_ids.iter().flat_map(|&(id, p)| [id, tuple[p] as u64]).collect();
            tuple_keys.push(fnv1a(&chunks));
        }

        Ok(BtfModel {
            predictors: ctx.predictors.clone(),
            partitions: partitions.to_vec(),
            cells,
            targets: ctx.targets.clone(),
            labels: ctx.labels.clone(),
            hyper,
            tuple_keys,
        })
    }

    pub fn num_points(&self) -> usize {
        self.targets.len()
    }

    pub fn num_predictors(&self) -> usize {
        self.predictors.len()
    }

    fn predictor_key(&self, p: usize) -> u64 {
        ((self.predictors[p].series as u64) << 32) | self.predictors[p].lag as u64
    }
}

/// Identifies one conditional draw within a sweep independently of cell
/// enumeration and predictor order.
#[derive(Debug, Clone, Copy)]
pub enum DrawId {
    /// `Z*_H` for the cell with the given stable tuple key.
    Cell(u64),
    /// Stick fraction of atom `l`.
    Stick(usize),
    /// Rate of atom `l`.
    Rate(usize),
    /// `pi^(j)(omega)` for predictor key / level.
    Mix(u64, usize),
    /// `z_{j,t}` for predictor key / target index.
    Alloc(u64, usize),
}

impl DrawId {
    fn chunks(self) -> [u64; 3] {
        match self {
            DrawId::Cell(k) => [1, k, 0],
            DrawId::Stick(l) => [2, l as u64, 0],
            DrawId::Rate(l) => [3, l as u64, 0],
            DrawId::Mix(k, w) => [4, k, w as u64],
            DrawId::Alloc(k, t) => [5, k, t as u64],
        }
    }
}

/// Source of conditional-draw randomness. The sequential source is the
/// production path; the keyed source derives an independent stream per
/// `(sweep, draw)` so that chains built over permuted cell enumerations
/// consume identical variates per logical entity.
pub trait Variates {
    fn uniform(&mut self, sweep: u64, id: DrawId) -> f64;
    fn gamma(&mut self, sweep: u64, id: DrawId, shape: f64, rate: f64) -> Result<f64>;
    fn beta(&mut self, sweep: u64, id: DrawId, a: f64, b: f64) -> Result<f64>;
    fn dirichlet(&mut self, sweep: u64, id: DrawId, conc: &[f64]) -> Result<Vec<f64>>;
}

/// Draws sequentially from one RNG stream, ignoring draw identities.
pub struct SeqVariates<R: Rng>(pub R);

impl<R: Rng> Variates for SeqVariates<R> {
    fn uniform(&mut self, _sweep: u64, _id: DrawId) -> f64 {
        self.0.random()
    }
    fn gamma(&mut self, _sweep: u64, _id: DrawId, shape: f64, rate: f64) -> Result<f64> {
        dist::sample_gamma(shape, rate, &mut self.0)
    }
    fn beta(&mut self, _sweep: u64, _id: DrawId, a: f64, b: f64) -> Result<f64> {
        dist::sample_beta(a, b, &mut self.0)
    }
    fn dirichlet(&mut self, _sweep: u64, _id: DrawId, conc: &[f64]) -> Result<Vec<f64>> {
        dist::sample_dirichlet(conc, &mut self.0)
    }
}

/// Derives a fresh ChaCha stream per `(sweep, draw identity)`.
pub struct KeyedVariates {
    pub master: u64,
}

impl KeyedVariates {
    fn rng(&self, sweep: u64, id: DrawId) -> SeedRng {
        let [a, b, c] = id.chunks();
        stream_rng(self.master, fnv1a(&[sweep, a, b, c]))
    }
}

impl Variates for KeyedVariates {
    fn uniform(&mut self, sweep: u64, id: DrawId) -> f64 {
        self.rng(sweep, id).random()
    }
    fn gamma(&mut self, sweep: u64, id: DrawId, shape: f64, rate: f64) -> Result<f64> {
        dist::sample_gamma(shape, rate, &mut self.rng(sweep, id))
    }
    fn beta(&mut self, sweep: u64, id: DrawId, a: f64, b: f64) -> Result<f64> {
        dist::sample_beta(a, b, &mut self.rng(sweep, id))
    }
    fn dirichlet(&mut self, sweep: u64, id: DrawId, conc: &[f64]) -> Result<Vec<f64>> {
        dist::sample_dirichlet(conc, &mut self.rng(sweep, id))
    }
}

/// All latent variables of the sampler plus incrementally maintained
/// per-cell statistics.
#[derive(Debug, Clone)]
pub struct SamplerState {
    /// `z[p][t]`: 0-based cluster allocation of predictor `p` at target `t`.
    pub z: Vec<Vec<u8>>,
    /// `zstar[cell]`: 0-based atom label of each cell.
    pub zstar: Vec<u16>,
    /// Stick fractions, last forced to 1 (truncation closure).
    pub v: Vec<f64>,
    /// Stick weights; sums to 1 exactly because of the closure.
    pub pistar: Vec<f64>,
    /// Atom rates.
    pub lambdastar: Vec<f64>,
    /// `pi[p][level][cluster]`, each a simplex over clusters.
    pub pi: Vec<Vec<Vec<f64>>>,
    /// Per-cell visit count `n_H` over training targets.
    pub cell_n: Vec<u32>,
    /// Per-cell count sum `n*_H`.
    pub cell_s: Vec<u64>,
    /// Current linear cell of each target.
    pub zcell: Vec<u64>,
}

fn sticks_to_weights(v: &[f64]) -> Vec<f64> {
    let mut weights = Vec::with_capacity(v.len());
    let mut rest = 1.0;
    for &frac in v {
        weights.push(frac * rest);
        rest *= 1.0 - frac;
    }
    weights
}

/// Recomputes `(cell_n, cell_s, zcell)` from the allocations alone.
pub fn cell_stats_from_scratch(model: &BtfModel, z: &[Vec<u8>]) -> (Vec<u32>, Vec<u64>, Vec<u64>) {
    let size = model.cells.size() as usize;
    let strides: Vec<u64> = (0..model.num_predictors()).map(|p| model.cells.stride(p)).collect();
    let mut cell_n = vec![0u32; size];
    let mut cell_s = vec![0u64; size];
    let mut zcell = vec![0u64; model.num_points()];
    for t in 0..model.num_points() {
        let mut lin = 0u64;
        for p in 0..model.num_predictors() {
            lin += z[p][t] as u64 * strides[p];
        }
        zcell[t] = lin;
        cell_n[lin as usize] += 1;
        cell_s[lin as usize] += model.targets[t] as u64;
    }
    (cell_n, cell_s, zcell)
}

/// Draws the initial state: allocations from the selected hard partitions,
/// everything else from its prior.
pub fn init_state<V: Variates>(model: &BtfModel, variates: &mut V) -> Result<SamplerState> {
    let l_max = model.hyper.l;
    let z: Vec<Vec<u8>> = (0..model.num_predictors())
        .map(|p| {
            model.labels[p]
                .iter()
                .map(|&level| model.partitions[p].cluster_of(level as usize))
                .collect()
        })
        .collect();
    let (cell_n, cell_s, zcell) = cell_stats_from_scratch(model, &z);

    let mut lambdastar = Vec::with_capacity(l_max);
    for l in 0..l_max {
        lambdastar.push(variates.gamma(0, DrawId::Rate(l), model.hyper.a, model.hyper.b)?);
    }
    let mut v = Vec::with_capacity(l_max);
    for l in 0..l_max {
        if l + 1 == l_max {
            v.push(1.0);
        } else {
            v.push(variates.beta(0, DrawId::Stick(l), 1.0, model.hyper.alpha0)?);
        }
    }
    let pistar = sticks_to_weights(&v);

    let mut zstar = Vec::with_capacity(model.cells.size() as usize);
    for cell in 0..model.cells.size() {
        let u = variates.uniform(0, DrawId::Cell(model.tuple_keys[cell as usize]));
        zstar.push(pick_from_probs(&pistar, u) as u16);
    }

    let mut pi = Vec::with_capacity(model.num_predictors());
    for p in 0..model.num_predictors() {
        let k = model.partitions[p].num_clusters();
        let conc = vec![model.hyper.gamma; k];
        let mut rows = Vec::with_capacity(model.predictors[p].levels);
        for level in 0..model.predictors[p].levels {
            rows.push(variates.dirichlet(0, DrawId::Mix(model.predictor_key(p), level), &conc)?);
        }
        pi.push(rows);
    }

    Ok(SamplerState { z, zstar, v, pistar, lambdastar, pi, cell_n, cell_s, zcell })
}

fn pick_from_probs(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn pick_from_log_weights(lw: &[f64], u: f64) -> Result<usize> {
    let max = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(Error::Numeric("all candidate log-weights are -inf".into()));
    }
    let total: f64 = lw.iter().map(|&w| (w - max).exp()).sum();
    let target = u * total;
    let mut acc = 0.0;
    for (i, &w) in lw.iter().enumerate() {
        acc += (w - max).exp();
        if target < acc {
            return Ok(i);
        }
    }
    Ok(lw.len() - 1)
}

/// Samples `z_{j,t}` for every predictor and target, maintaining the cell
/// statistics incrementally.
pub fn step_z<V: Variates>(
    model: &BtfModel,
    state: &mut SamplerState,
    sweep: u64,
    variates: &mut V,
) -> Result<()> {
    let mut lw: Vec<f64> = Vec::new();
    for p in 0..model.num_predictors() {
        let k = model.partitions[p].num_clusters();
        if k == 1 {
            continue;
        }
        let stride = model.cells.stride(p);
        let key = model.predictor_key(p);
        for t in 0..model.num_points() {
            let y = model.targets[t];
            let level = model.labels[p][t] as usize;
            let old_h = state.z[p][t] as u64;
            let base = state.zcell[t] - old_h * stride;
            lw.clear();
            for h in 0..k as u64 {
                let cell = (base + h * stride) as usize;
                let lambda = state.lambdastar[state.zstar[cell] as usize];
                let w = state.pi[p][level][h as usize].ln() + y as f64 * lambda.ln() - lambda;
                lw.push(w);
            }
            let u = variates.uniform(sweep, DrawId::Alloc(key, t));
            let new_h = pick_from_log_weights(&lw, u)? as u64;
            if new_h != old_h {
                let old_cell = state.zcell[t] as usize;
                let new_cell = (base + new_h * stride) as usize;
                state.cell_n[old_cell] -= 1;
                state.cell_s[old_cell] -= y as u64;
                state.cell_n[new_cell] += 1;
                state.cell_s[new_cell] += y as u64;
                state.zcell[t] = (base + new_h * stride) as u64;
                state.z[p][t] = new_h as u8;
            }
        }
    }
    Ok(())
}

/// Samples `Z*_H` for every cell. Occupied cells weigh atoms by
/// `pi*_l lambda_l^{n*_H} exp(-n_H lambda_l)` in log space; empty cells
/// draw from `pi*` directly.
pub fn step_zstar<V: Variates>(
    model: &BtfModel,
    state: &mut SamplerState,
    sweep: u64,
    variates: &mut V,
) -> Result<()> {
    let l_max = model.hyper.l;
    if l_max == 1 {
        return Ok(());
    }
    let ln_pistar: Vec<f64> = state.pistar.iter().map(|&w| w.ln()).collect();
    let ln_lambda: Vec<f64> = state.lambdastar.iter().map(|&l| l.ln()).collect();
    let mut lw = vec![0.0; l_max];
    for cell in 0..model.cells.size() as usize {
        let u = variates.uniform(sweep, DrawId::Cell(model.tuple_keys[cell]));
        let n = state.cell_n[cell];
        if n == 0 {
            state.zstar[cell] = pick_from_probs(&state.pistar, u) as u16;
            continue;
        }
        let s = state.cell_s[cell] as f64;
        for l in 0..l_max {
            lw[l] = ln_pistar[l] + s * ln_lambda[l] - n as f64 * state.lambdastar[l];
        }
        state.zstar[cell] = pick_from_log_weights(&lw, u)? as u16;
    }
    Ok(())
}

/// Samples the stick fractions from `Beta(1 + N*_l, alpha0 + sum_{l'>l}
/// N*_{l'})`, forces the last to 1 and recomputes the weights.
pub fn step_sticks<V: Variates>(
    model: &BtfModel,
    state: &mut SamplerState,
    sweep: u64,
    variates: &mut V,
) -> Result<()> {
    let l_max = model.hyper.l;
    let mut counts = vec![0u64; l_max];
    for &label in &state.zstar {
        counts[label as usize] += 1;
    }
    let mut tail = vec![0u64; l_max + 1];
    for l in (0..l_max).rev() {
        tail[l] = tail[l + 1] + counts[l];
    }
    for l in 0..l_max {
        if l + 1 == l_max {
            state.v[l] = 1.0;
        } else {
            state.v[l] = variates.beta(
                sweep,
                DrawId::Stick(l),
                1.0 + counts[l] as f64,
                model.hyper.alpha0 + tail[l + 1] as f64,
            )?;
        }
    }
    state.pistar = sticks_to_weights(&state.v);
    Ok(())
}

/// Samples each atom rate from `Gamma(a + N*_H(l), b + N_H(l))`; atoms with
/// no cells refresh from the prior (the same formula with zero counts).
pub fn step_rates<V: Variates>(
    model: &BtfModel,
    state: &mut SamplerState,
    sweep: u64,
    variates: &mut V,
) -> Result<()> {
    let l_max = model.hyper.l;
    let mut sum_s = vec![0u64; l_max];
    let mut sum_n = vec![0u64; l_max];
    for cell in 0..model.cells.size() as usize {
        let l = state.zstar[cell] as usize;
        sum_s[l] += state.cell_s[cell];
        sum_n[l] += state.cell_n[cell] as u64;
    }
    for l in 0..l_max {
        state.lambdastar[l] = variates.gamma(
            sweep,
            DrawId::Rate(l),
            model.hyper.a + sum_s[l] as f64,
            model.hyper.b + sum_n[l] as f64,
        )?;
    }
    Ok(())
}

/// Tabulates `n_{j,omega}(h) = #\{t : z_{j,t} = h, d_{j,t} = omega\}`.
pub fn pi_counts(model: &BtfModel, z: &[Vec<u8>]) -> Vec<Vec<Vec<u64>>> {
    (0..model.num_predictors())
        .map(|p| {
            let k = model.partitions[p].num_clusters();
            let mut counts = vec![vec![0u64; k]; model.predictors[p].levels];
            for t in 0..model.num_points() {
                counts[model.labels[p][t] as usize][z[p][t] as usize] += 1;
            }
            counts
        })
        .collect()
}

/// Samples `pi^(j)(omega)` from its Dirichlet conditional for every
/// predictor and level; unobserved levels reduce to the prior.
pub fn step_pi<V: Variates>(
    model: &BtfModel,
    state: &mut SamplerState,
    sweep: u64,
    variates: &mut V,
) -> Result<()> {
    let counts = pi_counts(model, &state.z);
    for p in 0..model.num_predictors() {
        let key = model.predictor_key(p);
        for level in 0..model.predictors[p].levels {
            let conc: Vec<f64> = counts[p][level]
                .iter()
                .map(|&n| model.hyper.gamma + n as f64)
                .collect();
            state.pi[p][level] = variates.dirichlet(sweep, DrawId::Mix(key, level), &conc)?;
        }
    }
    Ok(())
}

/// One retained draw, sufficient to evaluate the one-step-ahead transition
/// pmf and predictive mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraw {
    pub pistar: Vec<f64>,
    pub lambdastar: Vec<f64>,
    pub v: Vec<f64>,
    pub zstar: Vec<u16>,
    pub pi: Vec<Vec<Vec<f64>>>,
}

impl PosteriorDraw {
    fn from_state(state: &SamplerState) -> Self {
        PosteriorDraw {
            pistar: state.pistar.clone(),
            lambdastar: state.lambdastar.clone(),
            v: state.v.clone(),
            zstar: state.zstar.clone(),
            pi: state.pi.clone(),
        }
    }
}

/// Runs the fixed-scan cycle `z -> Z* -> V -> lambda* -> pi`, retaining
/// every `thin`-th post-burn-in state. Cell statistics are rebuilt from
/// scratch every 100 sweeps to bound incremental drift.
pub fn run_chain<V: Variates>(
    model: &BtfModel,
    burnin: usize,
    iters: usize,
    thin: usize,
    variates: &mut V,
) -> Result<Vec<PosteriorDraw>> {
    if thin < 1 {
        return Err(Error::Config("thin must be >= 1".into()));
    }
    if iters < 1 {
        return Err(Error::Config("need at least one retained iteration".into()));
    }
    let mut state = init_state(model, variates)?;
    let mut draws = Vec::with_capacity(iters / thin + 1);
    for sweep in 1..=(burnin + iters) as u64 {
        step_z(model, &mut state, sweep, variates)?;
        step_zstar(model, &mut state, sweep, variates)?;
        step_sticks(model, &mut state, sweep, variates)?;
        step_rates(model, &mut state, sweep, variates)?;
        step_pi(model, &mut state, sweep, variates)?;

        if sweep % 100 == 0 {
            let (n, s, zc) = cell_stats_from_scratch(model, &state.z);
            debug_assert_eq!(n, state.cell_n);
            debug_assert_eq!(s, state.cell_s);
            state.cell_n = n;
            state.cell_s = s;
            state.zcell = zc;
        }

        let post = sweep as usize;
        if post > burnin && (post - burnin) % thin == 0 {
            draws.push(PosteriorDraw::from_state(&state));
        }
    }
    Ok(draws)
}

/// Production entry point: seeded sequential randomness.
pub fn run_chain_seeded(
    model: &BtfModel,
    burnin: usize,
    iters: usize,
    thin: usize,
    rng: SeedRng,
) -> Result<Vec<PosteriorDraw>> {
    run_chain(model, burnin, iters, thin, &mut SeqVariates(rng))
}

/// The conditional mixture a draw induces at one context: per-cell weights
/// `prod_j pi^(j)_{h_j}(d_j)` and rates `lambda*_{Z*_H}`.
#[derive(Debug, Clone)]
pub struct CellMixture {
    pub weights: Vec<f64>,
    pub rates: Vec<f64>,
}

/// Builds the cell mixture of `draw` at `context` (0-based labels per
/// predictor).
pub fn cell_mixture(cells: &CellSpace, draw: &PosteriorDraw, context: &[u16]) -> Result<CellMixture> {
    let p_count = cells.num_predictors();
    if context.len() != p_count || draw.pi.len() != p_count {
        return Err(Error::Schema(format!(
            "context/draw cover {}/{} predictors, cell space has {p_count}",
            context.len(),
            draw.pi.len()
        )));
    }
    let mut per_pred: Vec<&[f64]> = Vec::with_capacity(p_count);
    for p in 0..p_count {
        let rows = &draw.pi[p];
        let level = context[p] as usize;
        if level >= rows.len() {
            return Err(Error::Schema(format!(
                "context label {level} out of range for predictor {p}"
            )));
        }
        per_pred.push(&rows[level]);
    }
    let size = cells.size() as usize;
    let mut weights = Vec::with_capacity(size);
    let mut rates = Vec::with_capacity(size);
    let mut tuple = vec![0u32; p_count]; // 0-based odometer
    for cell in 0..size {
        let mut w = 1.0;
        for p in 0..p_count {
            w *= per_pred[p][tuple[p] as usize];
        }
        weights.push(w);
        rates.push(draw.lambdastar[draw.zstar[cell] as usize]);
        for p in 0..p_count {
            tuple[p] += 1;
            if tuple[p] < cells.radices()[p] {
                break;
            }
            tuple[p] = 0;
        }
    }
    Ok(CellMixture { weights, rates })
}

impl CellMixture {
    /// Transition pmf `p(y | D_t)` of this draw.
    pub fn pmf(&self, y: u32) -> f64 {
        self.weights
            .iter()
            .zip(&self.rates)
            .map(|(&w, &r)| {
                if w > 0.0 {
                    w * poisson_log_pmf_unchecked(y, r).exp()
                } else {
                    0.0
                }
            })
            .sum()
    }

    /// Conditional expectation `sum_H lambda_H prod_j pi^(j)`.
    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.rates).map(|(&w, &r)| w * r).sum()
    }

    pub fn max_rate(&self) -> f64 {
        self.rates.iter().copied().fold(0.0, f64::max)
    }
}

/// One-step-ahead transition probability of `y` at `context` under `draw`.
pub fn transition_pmf(
    cells: &CellSpace,
    draw: &PosteriorDraw,
    context: &[u16],
    y: u32,
) -> Result<f64> {
    Ok(cell_mixture(cells, draw, context)?.pmf(y))
}

/// Predictive mean at `context` under `draw`.
pub fn predictive_mean(cells: &CellSpace, draw: &PosteriorDraw, context: &[u16]) -> Result<f64> {
    Ok(cell_mixture(cells, draw, context)?.mean())
}

/// Draw-averaged predictive pmf over `0..=y_max` plus the attained mass.
fn averaged_pmf(mixtures: &[CellMixture], y_max: u32) -> Vec<f64> {
    let mut pmf = vec![0.0; y_max as usize + 1];
    for mix in mixtures {
        for (y, slot) in pmf.iter_mut().enumerate() {
            *slot += mix.pmf(y as u32);
        }
    }
    for slot in &mut pmf {
        *slot /= mixtures.len() as f64;
    }
    pmf
}

/// Highest-density region of the draw-averaged predictive pmf at `level`
/// (e.g. 0.95), returned as the min/max of the selected support.
pub fn predictive_interval(
    cells: &CellSpace,
    draws: &[PosteriorDraw],
    context: &[u16],
    level: f64,
) -> Result<(u32, u32)> {
    if draws.is_empty() {
        return Err(Error::Schema("no draws".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Config(format!("interval level {level} not in (0,1)")));
    }
    let mixtures: Vec<CellMixture> = draws
        .iter()
        .map(|d| cell_mixture(cells, d, context))
        .collect::<Result<_>>()?;
    let top_rate = mixtures.iter().map(|m| m.max_rate()).fold(0.0, f64::max);
    let mut y_max = (top_rate + 12.0 * top_rate.sqrt() + 30.0).ceil() as u32;
    let mut pmf = averaged_pmf(&mixtures, y_max);
    let mut mass: f64 = pmf.iter().sum();
    while mass < 1.0 - 1e-6 && y_max < 4_000_000 {
        y_max *= 2;
        pmf = averaged_pmf(&mixtures, y_max);
        mass = pmf.iter().sum();
    }

    let mut order: Vec<usize> = (0..pmf.len()).collect();
    order.sort_by(|&i, &j| pmf[j].total_cmp(&pmf[i]).then(i.cmp(&j)));
    let mut selected_mass = 0.0;
    let mut lo = u32::MAX;
    let mut hi = 0u32;
    for &y in &order {
        selected_mass += pmf[y];
        lo = lo.min(y as u32);
        hi = hi.max(y as u32);
        if selected_mass >= level * mass.min(1.0) {
            break;
        }
    }
    Ok((lo, hi))
}

/// Validates a retained draw: stick composition, simplex sums, positivity
/// and label ranges, all at tolerance `tol`.
pub fn check_draw(model_l: usize, cells: &CellSpace, draw: &PosteriorDraw, tol: f64) -> Result<()> {
    if draw.pistar.len() != model_l || draw.v.len() != model_l || draw.lambdastar.len() != model_l {
        return Err(Error::Schema("draw truncation mismatch".into()));
    }
    let weights = sticks_to_weights(&draw.v);
    for (l, (&w, &expect)) in draw.pistar.iter().zip(&weights).enumerate() {
        if (w - expect).abs() > tol {
            return Err(Error::Numeric(format!(
                "stick formula violated at atom {l}: {w} vs {expect}"
            )));
        }
    }
    let total: f64 = draw.pistar.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Numeric(format!("stick weights sum to {total}")));
    }
    if draw.lambdastar.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::Numeric("non-positive atom rate".into()));
    }
    if draw.zstar.len() != cells.size() as usize {
        return Err(Error::Schema("draw cell count mismatch".into()));
    }
    if draw.zstar.iter().any(|&l| l as usize >= model_l) {
        return Err(Error::Numeric("cell label out of range".into()));
    }
    for rows in &draw.pi {
        for simplex in rows {
            let s: f64 = simplex.iter().sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::Numeric(format!("pi simplex sums to {s}")));
            }
            if simplex.iter().any(|&p| p < 0.0) {
                return Err(Error::Numeric("negative pi entry".into()));
            }
        }
    }
    Ok(())
}

/// `|1 - sum_y pmf(y)|` with the sum truncated adaptively; used by the
/// normalisation checks.
pub fn pmf_normalization_error(
    cells: &CellSpace,
    draw: &PosteriorDraw,
    context: &[u16],
) -> Result<f64> {
    let mix = cell_mixture(cells, draw, context)?;
    let top = mix.max_rate();
    let y_max = (top + 15.0 * top.sqrt() + 60.0).ceil() as u32;
    let total: f64 = (0..=y_max).map(|y| mix.pmf(y)).sum();
    Ok((total - 1.0).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lags::Contexts;

    fn toy_model(
        targets: Vec<u32>,
        labels: Vec<Vec<u16>>,
        levels: Vec<usize>,
        partitions: Vec<Partition>,
        hyper: GibbsHyper,
    ) -> BtfModel {
        let predictors = levels
            .into_iter()
            .enumerate()
            .map(|(i, levels)| Predictor { series: 0, lag: i + 1, levels })
            .collect();
        let ctx = Contexts::new(predictors, targets, labels).unwrap();
        BtfModel::new(&ctx, &partitions, hyper, 1_000_000).unwrap()
    }

    fn default_hyper(l: usize) -> GibbsHyper {
        GibbsHyper { gamma: 0.1, a: 2.0, b: 1.0, alpha0: 1.0, l }
    }

    fn seq(seed: u64) -> SeqVariates<SeedRng> {
        SeqVariates(stream_rng(seed, 0))
    }

    #[test]
    fn degenerate_model_single_cell() {
        let model = toy_model(
            vec![2, 3, 4],
            vec![vec![0, 1, 1]],
            vec![2],
            vec![Partition::single(2)],
            default_hyper(3),
        );
        let state = init_state(&model, &mut seq(31)).unwrap();
        assert_eq!(model.cells.size(), 1);
        assert!(state.z[0].iter().all(|&h| h == 0));
        assert_eq!(state.cell_n[0], 3);
        assert_eq!(state.cell_s[0], 9);
    }

    #[test]
    fn init_is_deterministic_and_valid() {
        let model = toy_model(
            vec![5, 0, 7, 2, 9, 1],
            vec![vec![0, 1, 1, 0, 1, 0], vec![1, 1, 0, 0, 1, 0]],
            vec![2, 2],
            vec![
                Partition::from_assign(&[0, 1]).unwrap(),
                Partition::from_assign(&[0, 1]).unwrap(),
            ],
            default_hyper(5),
        );
        let s1 = init_state(&model, &mut seq(32)).unwrap();
        let s2 = init_state(&model, &mut seq(32)).unwrap();
        assert_eq!(s1.lambdastar, s2.lambdastar);
        assert_eq!(s1.zstar, s2.zstar);
        assert_eq!(s1.pi, s2.pi);

        // invariants: stick composition, simplex sums, stats consistency
        let draw = PosteriorDraw::from_state(&s1);
        check_draw(5, &model.cells, &draw, 1e-10).unwrap();
        let (n, s, zc) = cell_stats_from_scratch(&model, &s1.z);
        assert_eq!(n, s1.cell_n);
        assert_eq!(s, s1.cell_s);
        assert_eq!(zc, s1.zcell);
    }

    #[test]
    fn zstar_prefers_matching_atom() {
        // two atoms (1, 100); a cell with n=5, S=0 must pick atom 1:
        // the log-weight gap is ~495
        let model = toy_model(
            vec![0, 0, 0, 0, 0],
            vec![vec![0, 0, 0, 0, 0]],
            vec![1],
            vec![Partition::single(1)],
            default_hyper(2),
        );
        let mut state = init_state(&model, &mut seq(33)).unwrap();
        state.lambdastar = vec![1.0, 100.0];
        state.pistar = vec![0.5, 0.5];
        for trial in 0..200u64 {
            step_zstar(&model, &mut state, trial, &mut seq(100 + trial)).unwrap();
            assert_eq!(state.zstar[0], 0);
        }
    }

    #[test]
    fn empty_cell_samples_from_pistar() {
        // k=2 but all data in cluster 0: cell 1 is empty and must follow pi*
        let model = toy_model(
            vec![1, 2, 1],
            vec![vec![0, 0, 0]],
            vec![2],
            vec![Partition::from_assign(&[0, 1]).unwrap()],
            default_hyper(3),
        );
        let mut state = init_state(&model, &mut seq(34)).unwrap();
        // freeze z so the second cell stays empty
        state.pistar = vec![0.6, 0.3, 0.1];
        let empty_cell = 1usize;
        assert_eq!(state.cell_n[empty_cell], 0);
        let n = 100_000u64;
        let mut counts = [0u64; 3];
        let mut variates = seq(35);
        for sweep in 0..n {
            step_zstar(&model, &mut state, sweep, &mut variates).unwrap();
            counts[state.zstar[empty_cell] as usize] += 1;
        }
        let expected = [0.6, 0.3, 0.1];
        let chi2: f64 = counts
            .iter()
            .zip(&expected)
            .map(|(&c, &p)| {
                let e = p * n as f64;
                (c as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 13.8, "chi2 {chi2}"); // df=2, 0.999 quantile
    }

    #[test]
    fn sticks_posterior_and_closure() {
        let model = toy_model(
            vec![1, 2],
            vec![vec![0, 1]],
            vec![2],
            vec![Partition::from_assign(&[0, 1]).unwrap()],
            default_hyper(4),
        );
        let mut state = init_state(&model, &mut seq(36)).unwrap();
        let mut variates = seq(37);
        for sweep in 0..2_000 {
            step_zstar(&model, &mut state, sweep, &mut variates).unwrap();
            step_sticks(&model, &mut state, sweep, &mut variates).unwrap();
            let total: f64 = state.pistar.iter().sum();
            assert!((total - 1.0).abs() < 1e-10, "pi* sums to {total}");
            assert_eq!(state.v[3], 1.0);
        }
    }

    #[test]
    fn rates_conjugate_posterior_and_prior_refresh() {
        // single cell holding all the data; atom 0 gets the conjugate
        // posterior, atom 1 never has cells... both are checked by moments
        let model = toy_model(
            vec![4, 6, 5, 5],
            vec![vec![0, 0, 0, 0]],
            vec![1],
            vec![Partition::single(1)],
            default_hyper(2),
        );
        let mut state = init_state(&model, &mut seq(38)).unwrap();
        state.zstar = vec![0];
        let (a, b) = (model.hyper.a, model.hyper.b);
        let n_rep = 20_000u64;
        let mut sum0 = 0.0;
        let mut sum1 = 0.0;
        let mut variates = seq(39);
        for sweep in 0..n_rep {
            step_rates(&model, &mut state, sweep, &mut variates).unwrap();
            sum0 += state.lambdastar[0];
            sum1 += state.lambdastar[1];
        }
        let post_mean = (a + 20.0) / (b + 4.0);
        assert!((sum0 / n_rep as f64 - post_mean).abs() < 0.05, "{}", sum0 / n_rep as f64);
        assert!((sum1 / n_rep as f64 - a / b).abs() < 0.06, "{}", sum1 / n_rep as f64);
    }

    #[test]
    fn pi_counts_match_enumeration_and_prior_for_unseen() {
        let targets = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        let labels = vec![vec![0u16, 1, 0, 1, 0, 1, 0, 1, 0, 1]];
        let model = toy_model(
            targets,
            labels,
            vec![3], // level 2 never observed
            vec![Partition::from_assign(&[0, 1, 1]).unwrap()],
            default_hyper(3),
        );
        let mut state = init_state(&model, &mut seq(40)).unwrap();
        state.z[0] = vec![0, 1, 0, 0, 0, 1, 1, 1, 0, 1];
        let counts = pi_counts(&model, &state.z);
        // level 0 appears at t = 0,2,4,6,8 with z = 0,0,0,1,0
        assert_eq!(counts[0][0], vec![4, 1]);
        // level 1 appears at t = 1,3,5,7,9 with z = 1,0,1,1,1
        assert_eq!(counts[0][1], vec![1, 4]);
        assert_eq!(counts[0][2], vec![0, 0]);

        // unseen level: mean of pi over repeats matches the symmetric prior
        let mut mean = [0.0f64; 2];
        let reps = 20_000u64;
        let mut variates = seq(41);
        for sweep in 0..reps {
            step_pi(&model, &mut state, sweep, &mut variates).unwrap();
            mean[0] += state.pi[0][2][0];
            mean[1] += state.pi[0][2][1];
        }
        assert!((mean[0] / reps as f64 - 0.5).abs() < 0.02);
        assert!((mean[1] / reps as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn step_z_matches_two_term_softmax() {
        // single target, q=1, k=2, fixed (lambda*, zstar, pi): with one
        // predictor the z-conditional does not depend on the current z, so
        // repeated sweeps draw iid from the two-term softmax
        let ctx = Contexts::new(
            vec![Predictor { series: 0, lag: 1, levels: 2 }],
            vec![3],
            vec![vec![0]],
        )
        .unwrap();
        let model = BtfModel::new(
            &ctx,
            &[Partition::from_assign(&[0, 1]).unwrap()],
            default_hyper(2),
            1_000_000,
        )
        .unwrap();
        let mut state = init_state(&model, &mut seq(42)).unwrap();
        state.lambdastar = vec![2.0, 6.0];
        state.zstar = vec![0, 1];
        state.pi[0][0] = vec![0.3, 0.7];
        let w0 = 0.3f64.ln() + 3.0 * 2.0f64.ln() - 2.0;
        let w1 = 0.7f64.ln() + 3.0 * 6.0f64.ln() - 6.0;
        let p1 = (w1 - crate::dist::log_sum_exp(&[w0, w1]).unwrap()).exp();
        let reps = 100_000u64;
        let mut hits = 0u64;
        let mut variates = seq(43);
        for sweep in 0..reps {
            step_z(&model, &mut state, sweep, &mut variates).unwrap();
            if state.z[0][0] == 1 {
                hits += 1;
            }
        }
        let freq = hits as f64 / reps as f64;
        assert!((freq - p1).abs() < 0.01, "freq {freq} vs {p1}");
    }

    #[test]
    fn incremental_stats_match_scratch_after_sweeps() {
        let mut rng = stream_rng(44, 0);
        let n = 60;
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..12)).collect();
        let labels: Vec<Vec<u16>> = (0..2)
            .map(|_| (0..n).map(|_| rng.random_range(0..3)).collect())
            .collect();
        let model = toy_model(
            targets,
            labels,
            vec![3, 3],
            vec![
                Partition::from_assign(&[0, 1, 0]).unwrap(),
                Partition::from_assign(&[0, 1, 2]).unwrap(),
            ],
            default_hyper(6),
        );
        let mut state = init_state(&model, &mut seq(45)).unwrap();
        let mut variates = seq(46);
        for sweep in 1..=25 {
            step_z(&model, &mut state, sweep, &mut variates).unwrap();
            step_zstar(&model, &mut state, sweep, &mut variates).unwrap();
            step_sticks(&model, &mut state, sweep, &mut variates).unwrap();
            step_rates(&model, &mut state, sweep, &mut variates).unwrap();
            step_pi(&model, &mut state, sweep, &mut variates).unwrap();
            let (cn, cs, zc) = cell_stats_from_scratch(&model, &state.z);
            assert_eq!(cn, state.cell_n);
            assert_eq!(cs, state.cell_s);
            assert_eq!(zc, state.zcell);
        }
    }

    #[test]
    fn chain_is_deterministic_given_seed() {
        let model = toy_model(
            vec![2, 4, 8, 3, 2, 7, 6],
            vec![vec![0, 1, 1, 0, 0, 1, 1]],
            vec![2],
            vec![Partition::from_assign(&[0, 1]).unwrap()],
            default_hyper(8),
        );
        let d1 = run_chain_seeded(&model, 20, 30, 2, stream_rng(47, 3)).unwrap();
        let d2 = run_chain_seeded(&model, 20, 30, 2, stream_rng(47, 3)).unwrap();
        assert_eq!(d1.len(), 15);
        assert_eq!(d1.len(), d2.len());
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.lambdastar, b.lambdastar);
            assert_eq!(a.zstar, b.zstar);
            assert_eq!(a.pi, b.pi);
        }
        for d in &d1 {
            check_draw(8, &model.cells, d, 1e-8).unwrap();
        }
    }

    #[test]
    fn transition_pmf_degenerate_and_hand_computed() {
        let model = toy_model(
            vec![2, 4],
            vec![vec![0, 1]],
            vec![2],
            vec![Partition::single(2)],
            default_hyper(2),
        );
        // degenerate: one cell, lambda known -> exactly PD(y; lambda)
        let draw = PosteriorDraw {
            pistar: vec![1.0, 0.0],
            lambdastar: vec![3.5, 9.9],
            v: vec![1.0, 1.0],
            zstar: vec![0],
            pi: vec![vec![vec![1.0], vec![1.0]]],
        };
        for y in 0..20 {
            let p = transition_pmf(&model.cells, &draw, &[0], y).unwrap();
            let expect = crate::dist::poisson_log_pmf(y, 3.5).unwrap().exp();
            assert!((p - expect).abs() < 1e-14);
        }
        assert!((predictive_mean(&model.cells, &draw, &[0]).unwrap() - 3.5).abs() < 1e-12);

        // 2-cell hand computation: weights (0.3, 0.7), rates (1, 10)
        let ctx = Contexts::new(
            vec![Predictor { series: 0, lag: 1, levels: 2 }],
            vec![2, 4],
            vec![vec![0, 1]],
        )
        .unwrap();
        let model2 = BtfModel::new(
            &ctx,
            &[Partition::from_assign(&[0, 1]).unwrap()],
            default_hyper(2),
            1_000_000,
        )
        .unwrap();
        let draw2 = PosteriorDraw {
            pistar: vec![0.5, 0.5],
            lambdastar: vec![1.0, 10.0],
            v: vec![0.5, 1.0],
            zstar: vec![0, 1],
            pi: vec![vec![vec![0.3, 0.7], vec![0.6, 0.4]]],
        };
        let p0 = transition_pmf(&model2.cells, &draw2, &[0], 0).unwrap();
        let expect = 0.3 * (-1.0f64).exp() + 0.7 * (-10.0f64).exp();
        assert!((p0 - expect).abs() < 1e-14, "{p0} vs {expect}");

        // moment consistency: mean equals sum_y y pmf(y)
        let mean = predictive_mean(&model2.cells, &draw2, &[0]).unwrap();
        let by_sum: f64 = (0..=200)
            .map(|y| y as f64 * transition_pmf(&model2.cells, &draw2, &[0], y).unwrap())
            .sum();
        assert!((mean - by_sum).abs() < 1e-6, "{mean} vs {by_sum}");

        // interval sanity: contains the mean for this unimodal-ish case
        let (lo, hi) = predictive_interval(&model2.cells, &[draw2.clone()], &[0], 0.95).unwrap();
        assert!((lo as f64) <= mean && mean <= hi as f64, "[{lo},{hi}] vs {mean}");
    }

    #[test]
    fn pmf_normalises_for_random_draws() {
        let mut rng = stream_rng(48, 0);
        let n = 40;
        let targets: Vec<u32> = (0..n).map(|_| rng.random_range(0..15)).collect();
        let labels: Vec<Vec<u16>> = (0..2)
            .map(|_| (0..n).map(|_| rng.random_range(0..3)).collect())
            .collect();
        let model = toy_model(
            targets,
            labels,
            vec![3, 3],
            vec![
                Partition::from_assign(&[0, 1, 1]).unwrap(),
                Partition::from_assign(&[0, 0, 1]).unwrap(),
            ],
            default_hyper(10),
        );
        let draws = run_chain_seeded(&model, 50, 20, 1, stream_rng(49, 0)).unwrap();
        for draw in &draws {
            check_draw(10, &model.cells, draw, 1e-8).unwrap();
            for context in [[0u16, 0], [1, 2], [2, 1]] {
                let err = pmf_normalization_error(&model.cells, draw, &context).unwrap();
                assert!(err < 1e-8, "normalisation error {err}");
            }
        }
    }

    /// Predictions are invariant to the cell enumeration order: a model
    /// with predictors listed in reverse consumes identical keyed variates
    /// per logical entity and must produce identical predictive pmfs.
    #[test]
    fn chain_invariant_to_cell_enumeration_order() {
        let targets = vec![3u32, 7, 2, 9, 4, 6, 1, 8];
        let lab_a: Vec<u16> = vec![0, 1, 1, 0, 1, 0, 0, 1];
        let lab_b: Vec<u16> = vec![1, 0, 2, 2, 0, 1, 2, 0];
        let hyper = default_hyper(6);

        let fwd_ctx = Contexts::new(
            vec![
                Predictor { series: 0, lag: 1, levels: 2 },
                Predictor { series: 0, lag: 2, levels: 3 },
            ],
            targets.clone(),
            vec![lab_a.clone(), lab_b.clone()],
        )
        .unwrap();
        let rev_ctx = Contexts::new(
            vec![
                Predictor { series: 0, lag: 2, levels: 3 },
                Predictor { series: 0, lag: 1, levels: 2 },
            ],
            targets,
            vec![lab_b, lab_a],
        )
        .unwrap();
        let part_a = Partition::from_assign(&[0, 1]).unwrap();
        let part_b = Partition::from_assign(&[0, 1, 1]).unwrap();
        let fwd = BtfModel::new(&fwd_ctx, &[part_a.clone(), part_b.clone()], hyper, 1_000_000).unwrap();
        let rev = BtfModel::new(&rev_ctx, &[part_b, part_a], hyper, 1_000_000).unwrap();

        let fwd_draws =
            run_chain(&fwd, 10, 20, 1, &mut KeyedVariates { master: 99 }).unwrap();
        let rev_draws =
            run_chain(&rev, 10, 20, 1, &mut KeyedVariates { master: 99 }).unwrap();

        for (df, dr) in fwd_draws.iter().zip(&rev_draws) {
            for (ctx_f, ctx_r) in [([0u16, 0], [0u16, 0]), ([1, 2], [2, 1]), ([0, 1], [1, 0])] {
                for y in [0u32, 3, 11] {
                    let pf = transition_pmf(&fwd.cells, df, &ctx_f, y).unwrap();
                    let pr = transition_pmf(&rev.cells, dr, &ctx_r, y).unwrap();
                    assert!(
                        (pf - pr).abs() < 1e-12,
                        "pmf differs under reordering: {pf} vs {pr}"
                    );
                }
            }
        }
    }
}
