//! Bayesian tensor-factorisation (BTF) models for time series of counts.
//!
//! The library implements the full two-step inference pipeline — a finite
//! Poisson mixture fitted to a pre-training segment, stochastic-search
//! selection of important lags, and a truncated stick-breaking Gibbs
//! sampler over the conditional tensor factorisation — together with a
//! Bayesian Poisson autoregressive baseline, seeded simulation designs and
//! log-predictive-score evaluation.
//!
//! Modules follow the pipeline order:
//!
//! * [`data`] — count series, splits, hyperparameters, cell indexing
//! * [`dist`] — seeded RNG streams and sampling kernels
//! * [`mixture`] — pre-training Poisson mixture and the count -> label rule
//! * [`lags`] — split/merge search over per-lag cluster counts
//! * [`gibbs`] — the main conditional-tensor-factorisation sampler
//! * [`par`] — Poisson autoregressive baseline (MLE, AIC/BIC, MH)
//! * [`datagen`] — simulation scenario generators and presets
//! * [`eval`] — log predictive score and comparison reports
//! * [`pipeline`] — manifests, experiment configs and the batch runner

pub mod data;
pub mod datagen;
pub mod dist;
pub mod error;
pub mod eval;
pub mod gibbs;
pub mod lags;
pub mod mixture;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
