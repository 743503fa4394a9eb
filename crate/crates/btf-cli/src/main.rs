//! Batch front end: simulate, fit, score and export. Every command is
//! deterministic given its inputs and seed, and the stages chain through
//! manifests so any one of them can be re-run in isolation.
//!
//! Exit codes: 0 ok, 2 schema/input error, 3 numeric failure, 4 config
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use btf::data::{CountSeries, Hyperparams};
use btf::datagen::{self, ScenarioSpec};
use btf::error::Error;
use btf::eval::trace_csv;
use btf::par::Criterion;
use btf::pipeline::{
    self, digest_bytes, fit_btf_stage, fit_mixture_stage, fit_par_stage, load_json,
    run_experiment, save_json, score_stage, select_lags_stage, write_text, DrawsFile,
    ExperimentConfig, LagManifest, MixtureManifest, MixtureOptions, ParOptions, SplitSpec,
};

#[derive(Parser)]
#[command(
    name = "btf",
    version,
    about = "Bayesian tensor-factorisation models for count time series",
    long_about = "Fits conditional-tensor-factorisation models to time series of counts \
                  via the two-step procedure (pre-training Poisson mixture, lag selection, \
                  stick-breaking Gibbs sampler), fits the Poisson autoregressive baseline, \
                  and scores both by the log predictive score."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SplitArgs {
    /// Pre-training segment length T1
    #[arg(long)]
    pre_train: usize,
    /// Training segment length T2 (the test segment is the remainder)
    #[arg(long)]
    train: usize,
    /// Maximal Markov order q
    #[arg(long)]
    q: usize,
}

impl SplitArgs {
    fn spec(&self) -> SplitSpec {
        SplitSpec { pre_train: self.pre_train, train: self.train, q: self.q }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario dataset as CSV
    Simulate {
        /// Named preset (table1-A .. table3-F)
        #[arg(long, conflicts_with = "spec_file")]
        scenario: Option<String>,
        /// TOML scenario specification
        #[arg(long)]
        spec_file: Option<PathBuf>,
        /// Override the series length
        #[arg(long)]
        t: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit per-series Poisson mixtures on the pre-training segment
    FitMixture {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Components before reduction
        #[arg(long, default_value_t = 10)]
        components: usize,
        #[arg(long, default_value_t = btf::mixture::DEFAULT_MIXTURE_BURNIN)]
        burnin: usize,
        #[arg(long, default_value_t = btf::mixture::DEFAULT_MIXTURE_ITERS)]
        iters: usize,
        /// Drop components lighter than this posterior-mean weight
        #[arg(long, default_value_t = 0.01)]
        min_weight: f64,
        /// Merge components whose rates differ by less than this fraction
        #[arg(long, default_value_t = 0.10)]
        merge_tol: f64,
        /// Keep all requested components (no reduction)
        #[arg(long)]
        no_reduce: bool,
        #[arg(long)]
        seed: u64,
        /// Output mixture manifest (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-series posterior trace CSVs
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Search for important lags by split/merge Metropolis-Hastings
    SelectLags {
        #[arg(long)]
        data: PathBuf,
        /// Mixture manifest from fit-mixture
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long, default_value_t = btf::lags::DEFAULT_LAG_BURNIN)]
        burnin: usize,
        #[arg(long, default_value_t = btf::lags::DEFAULT_LAG_ITERS)]
        iters: usize,
        /// Target series (1-based) for multivariate data
        #[arg(long, default_value_t = 1)]
        target: usize,
        #[arg(long)]
        seed: u64,
        /// Output lag manifest (JSON)
        #[arg(long)]
        out: PathBuf,
        /// Inclusion-proportion summary CSV
        #[arg(long)]
        inclusion_csv: Option<PathBuf>,
        /// Full iteration trace CSV (iter, j, k_j)
        #[arg(long)]
        k_trace_csv: Option<PathBuf>,
    },
    /// Run the main sampler under the selected lags
    FitBtf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mixture: PathBuf,
        /// Lag manifest from select-lags
        #[arg(long)]
        lags: PathBuf,
        #[arg(long, default_value_t = btf::gibbs::DEFAULT_BTF_BURNIN)]
        burnin: usize,
        #[arg(long, default_value_t = btf::gibbs::DEFAULT_BTF_ITERS)]
        iters: usize,
        #[arg(long, default_value_t = 1)]
        thin: usize,
        #[arg(long)]
        seed: u64,
        /// Output posterior dump (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Poisson autoregressive baseline (order selection + MH)
    FitPar {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        split: SplitArgs,
        /// Largest candidate order
        #[arg(long, default_value_t = 12)]
        q_max: usize,
        #[arg(long, default_value = "bic")]
        criterion: String,
        #[arg(long, default_value_t = btf::par::DEFAULT_PAR_BURNIN)]
        burnin: usize,
        #[arg(long, default_value_t = btf::par::DEFAULT_PAR_ITERS)]
        iters: usize,
        /// Target series (1-based) for multivariate data
        #[arg(long, default_value_t = 1)]
        target: usize,
        #[arg(long)]
        seed: u64,
        /// Output posterior dump (JSON)
        #[arg(long)]
        out: PathBuf,
        /// AIC/BIC table CSV
        #[arg(long)]
        orders_csv: Option<PathBuf>,
        /// Coefficient posterior summary CSV
        #[arg(long)]
        summary_csv: Option<PathBuf>,
    },
    /// Score a posterior dump on the test segment
    Score {
        #[arg(long)]
        data: PathBuf,
        /// Posterior dump from fit-btf or fit-par
        #[arg(long)]
        draws: PathBuf,
        /// Output score CSV
        #[arg(long)]
        out: PathBuf,
        /// Per-test-point predictive trace CSV
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Credible-region level
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Run a whole experiment (replicates, both models, comparison report)
    Experiment {
        /// TOML experiment configuration
        #[arg(long)]
        config: PathBuf,
        /// Override the configured parallelism
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn read_series(path: &Path) -> Result<(CountSeries, String), Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let series = CountSeries::from_csv_bytes(&bytes)?;
    Ok((series, digest_bytes(&bytes)))
}

fn load_mixture(path: &Path) -> Result<MixtureManifest, Error> {
    let manifest: MixtureManifest = load_json(path)?;
    manifest.validate()?;
    Ok(manifest)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { scenario, spec_file, t, seed, out } => {
            let spec = match (scenario, spec_file) {
                (Some(name), None) => datagen::preset(&name).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown scenario {name:?}; known: {}",
                        datagen::preset_names().join(", ")
                    ))
                })?,
                (None, Some(path)) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    ScenarioSpec::from_toml_str(&text)?
                }
                _ => {
                    return Err(Error::Config(
                        "exactly one of --scenario / --spec-file is required".into(),
                    ))
                }
            };
            let spec = match t {
                Some(t) => spec.with_len(t),
                None => spec,
            };
            let series = datagen::generate_seeded(&spec, seed)?;
            series.write_csv_path(&out)?;
            eprintln!(
                "wrote {} ({} series x {} points)",
                out.display(),
                series.num_series(),
                series.len()
            );
        }

        Command::FitMixture {
            data,
            split,
            components,
            burnin,
            iters,
            min_weight,
            merge_tol,
            no_reduce,
            seed,
            out,
            trace_dir,
        } => {
            let (series, digest) = read_series(&data)?;
            let opts = MixtureOptions {
                components,
                burnin,
                iters,
                min_weight,
                merge_tol,
                reduce: !no_reduce,
            };
            let (manifest, fits) =
                fit_mixture_stage(&series, &split.spec(), &opts, &digest, seed)?;
            for s in &manifest.series {
                for w in &s.warnings {
                    eprintln!("warning: series {}: {w}", s.name);
                }
            }
            if let Some(dir) = trace_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for (fit, name) in fits.iter().zip(series.names()) {
                    write_text(&dir.join(format!("mixture_trace_{name}.csv")), &fit.trace_csv())?;
                }
            }
            save_json(&manifest, &out)?;
            for s in &manifest.series {
                eprintln!("series {}: {} components, rates {:?}", s.name, s.rates.len(), s.rates);
            }
        }

        Command::SelectLags {
            data,
            mixture,
            burnin,
            iters,
            target,
            seed,
            out,
            inclusion_csv,
            k_trace_csv,
        } => {
            let (series, digest) = read_series(&data)?;
            let manifest = load_mixture(&mixture)?;
            let (lag_manifest, trace) = select_lags_stage(
                &series,
                &manifest,
                &Hyperparams::default(),
                burnin,
                iters,
                target,
                &digest,
                seed,
            )?;
            if let Some(path) = inclusion_csv {
                let predictors: Vec<_> =
                    lag_manifest.predictors.iter().map(|p| p.predictor()).collect();
                write_text(&path, &trace.inclusion_csv(&predictors))?;
            }
            if let Some(path) = k_trace_csv {
                write_text(&path, &trace.k_csv())?;
            }
            save_json(&lag_manifest, &out)?;
            for p in &lag_manifest.predictors {
                if p.k > 1 {
                    eprintln!("important: series {} lag {} (k = {})", p.series, p.lag, p.k);
                }
            }
        }

        Command::FitBtf { data, mixture, lags, burnin, iters, thin, seed, out } => {
            let (series, digest) = read_series(&data)?;
            let manifest = load_mixture(&mixture)?;
            let lag_manifest: LagManifest = load_json(&lags)?;
            lag_manifest.validate()?;
            let draws = fit_btf_stage(
                &series,
                &manifest,
                &lag_manifest,
                burnin,
                iters,
                thin,
                &digest,
                seed,
            )?;
            eprintln!("retained {} draws over {} cells", draws.draws.len(), draws.cell_space()?.size());
            save_json(&draws, &out)?;
        }

        Command::FitPar {
            data,
            split,
            q_max,
            criterion,
            burnin,
            iters,
            target,
            seed,
            out,
            orders_csv,
            summary_csv,
        } => {
            let (series, digest) = read_series(&data)?;
            let opts = ParOptions {
                q_max,
                criterion: criterion.parse::<Criterion>()?,
                burnin,
                iters,
            };
            let draws =
                fit_par_stage(&series, &split.spec(), &opts, target, &digest, seed)?;
            for w in &draws.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(path) = orders_csv {
                let mut text = String::from("q,log_lik,aic,bic,converged\n");
                for row in &draws.order_table {
                    text.push_str(&format!(
                        "{},{},{},{},{}\n",
                        row.q, row.log_lik, row.aic, row.bic, row.converged
                    ));
                }
                write_text(&path, &text)?;
            }
            if let Some(path) = summary_csv {
                let par_draws = btf::par::ParDraws {
                    design: draws.design.clone(),
                    beta: draws.beta.clone(),
                    acceptance: draws.acceptance,
                    warnings: vec![],
                };
                write_text(&path, &par_draws.summary_csv())?;
            }
            eprintln!(
                "selected order {} by {:?}; acceptance {:.3}",
                draws.design.q, draws.criterion, draws.acceptance
            );
            save_json(&draws, &out)?;
        }

        Command::Score { data, draws, out, trace, level } => {
            let (series, digest) = read_series(&data)?;
            let file = pipeline::load_draws_file(&draws)?;
            let (score, rows) = score_stage(&series, &file, &digest, level)?;
            let model = match &file {
                DrawsFile::Btf(_) => "btf",
                DrawsFile::Par(_) => "par",
            };
            let mut text = String::from("model,log_predictive_score,floored\n");
            text.push_str(&format!("{model},{},{}\n", score.score, score.floored));
            write_text(&out, &text)?;
            if let Some(path) = trace {
                write_text(&path, &trace_csv(&rows, level))?;
            }
            if score.floored > 0 {
                eprintln!("warning: {} probabilities floored at 1e-300", score.floored);
            }
            eprintln!("{model} log predictive score: {:.4}", score.score);
        }

        Command::Experiment { config, jobs } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut parsed = ExperimentConfig::from_toml_str(&text)?;
            if let Some(jobs) = jobs {
                parsed.experiment.jobs = Some(jobs);
            }
            let base = config.parent().map(Path::to_path_buf).unwrap_or_default();
            let result = run_experiment(&parsed, &base)?;
            print!("{}", btf::eval::report_text(&result.rows));
            eprintln!("artifacts under {}", result.out_dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Schema(_) | Error::Io { .. } => 2,
        Error::Numeric(_) => 3,
        Error::Config(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
