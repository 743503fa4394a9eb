//! Scoring and reporting: the log predictive score, per-test-point
//! predictive traces with credible regions, and model-comparison tables.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CellSpace, CountSeries, DataSplit};
use crate::error::{Error, Result};
use crate::gibbs::{cell_mixture, predictive_interval, CellMixture, PosteriorDraw};
use crate::lags::Predictor;
use crate::mixture::LabelRule;
use crate::par::{par_transition_pmf, ParDesign};

/// Probabilities below this are floored (and counted) before taking logs;
/// numerically-zero transition probabilities on test outcomes would
/// otherwise sink the whole average.
pub const PROB_FLOOR: f64 = 1e-300;

/// A log predictive score plus the number of floored probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub score: f64,
    pub floored: u64,
}

/// `-sum_t sum_i ln p_hat^(i)(y_t) / (T N)`: the double average of negative
/// log one-step-ahead probabilities. Smaller is better.
pub fn log_predictive_score(pmf_values: &[Vec<f64>]) -> Result<ScoreResult> {
    if pmf_values.is_empty() {
        return Err(Error::Schema("no test points to score".into()));
    }
    let n_draws = pmf_values[0].len();
    if n_draws == 0 {
        return Err(Error::Schema("no draws to score".into()));
    }
    let mut total = 0.0;
    let mut floored = 0u64;
    for row in pmf_values {
        if row.len() != n_draws {
            return Err(Error::Schema("ragged pmf matrix".into()));
        }
        for &p in row {
            if !(p.is_finite() && p >= 0.0 && p <= 1.0 + 1e-12) {
                return Err(Error::Numeric(format!("pmf value {p} outside [0, 1]")));
            }
            let p = if p < PROB_FLOOR {
                floored += 1;
                PROB_FLOOR
            } else {
                p
            };
            total -= p.ln();
        }
    }
    Ok(ScoreResult { score: total / (pmf_values.len() as f64 * n_draws as f64), floored })
}

/// Labels the lag context of target `t` (0-based): the label of
/// `y_{series_p, t - lag_p}` per predictor.
pub fn context_at(all_labels: &[Vec<u16>], predictors: &[Predictor], t: usize) -> Vec<u16> {
    predictors.iter().map(|p| all_labels[p.series][t - p.lag]).collect()
}

fn btf_mixtures_at(
    cells: &CellSpace,
    predictors: &[Predictor],
    draws: &[PosteriorDraw],
    all_labels: &[Vec<u16>],
    t: usize,
) -> Result<Vec<CellMixture>> {
    let context = context_at(all_labels, predictors, t);
    draws.iter().map(|d| cell_mixture(cells, d, &context)).collect()
}

/// Scores the BTF draws on the test segment. Contexts use the true
/// one-step-ahead history (test-period lags are labelled through the same
/// total pre-training rule, so unseen counts still score finitely).
pub fn score_btf(
    cells: &CellSpace,
    predictors: &[Predictor],
    draws: &[PosteriorDraw],
    rules: &[LabelRule],
    series: &CountSeries,
    split: &DataSplit,
    target: usize,
) -> Result<ScoreResult> {
    split.check_series(series)?;
    if split.test_len == 0 {
        return Err(Error::Schema("split has no test segment".into()));
    }
    if draws.is_empty() {
        return Err(Error::Schema("no draws to score".into()));
    }
    let all_labels: Vec<Vec<u16>> = (0..series.num_series())
        .map(|m| rules[m].label_series(series.series(m)))
        .collect();
    let pmf: Vec<Vec<f64>> = split
        .test_targets()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&t| {
            let mixtures = btf_mixtures_at(cells, predictors, draws, &all_labels, t)?;
            let y = series.value(target, t);
            Ok(mixtures.iter().map(|m| m.pmf(y)).collect())
        })
        .collect::<Result<_>>()?;
    log_predictive_score(&pmf)
}

/// Scores PAR coefficient draws on the test segment with true history.
pub fn score_par(
    design: &ParDesign,
    beta_draws: &[Vec<f64>],
    series: &CountSeries,
    split: &DataSplit,
) -> Result<ScoreResult> {
    split.check_series(series)?;
    if split.test_len == 0 {
        return Err(Error::Schema("split has no test segment".into()));
    }
    if beta_draws.is_empty() {
        return Err(Error::Schema("no draws to score".into()));
    }
    let pmf: Vec<Vec<f64>> = split
        .test_targets()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&t| {
            let y = series.value(design.target, t);
            beta_draws
                .iter()
                .map(|beta| par_transition_pmf(design, beta, series, t, y))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    log_predictive_score(&pmf)
}

/// One row of the predictive trace export: observation, draw-averaged
/// predictive mean and the bounds of the highest-density credible region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveTraceRow {
    /// 1-based time index.
    pub t: usize,
    pub y: u32,
    pub mean: f64,
    pub lo: u32,
    pub hi: u32,
}

pub fn trace_csv(rows: &[PredictiveTraceRow], level: f64) -> String {
    let pct = (level * 100.0).round() as u32;
    let mut out = format!("t,y,predictive_mean,lo{pct},hi{pct}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.t, r.y, r.mean, r.lo, r.hi));
    }
    out
}

/// Predictive trace of the BTF draws over the test segment.
pub fn btf_predictive_trace(
    cells: &CellSpace,
    predictors: &[Predictor],
    draws: &[PosteriorDraw],
    rules: &[LabelRule],
    series: &CountSeries,
    split: &DataSplit,
    target: usize,
    level: f64,
) -> Result<Vec<PredictiveTraceRow>> {
    split.check_series(series)?;
    let all_labels: Vec<Vec<u16>> = (0..series.num_series())
        .map(|m| rules[m].label_series(series.series(m)))
        .collect();
    split
        .test_targets()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&t| {
            let context = context_at(&all_labels, predictors, t);
            let mixtures = btf_mixtures_at(cells, predictors, draws, &all_labels, t)?;
            let mean =
                mixtures.iter().map(|m| m.mean()).sum::<f64>() / mixtures.len() as f64;
            let (lo, hi) = predictive_interval(cells, draws, &context, level)?;
            Ok(PredictiveTraceRow { t: t + 1, y: series.value(target, t), mean, lo, hi })
        })
        .collect()
}

/// Predictive trace of the PAR draws over the test segment: the interval is
/// the highest-density region of the draw-averaged Poisson mixture.
pub fn par_predictive_trace(
    design: &ParDesign,
    beta_draws: &[Vec<f64>],
    series: &CountSeries,
    split: &DataSplit,
    level: f64,
) -> Result<Vec<PredictiveTraceRow>> {
    split.check_series(series)?;
    if beta_draws.is_empty() {
        return Err(Error::Schema("no draws".into()));
    }
    split
        .test_targets()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&t| {
            let rates: Vec<f64> = beta_draws
                .iter()
                .map(|beta| design.log_rate(beta, series, t).exp())
                .collect();
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let top = rates.iter().copied().fold(0.0, f64::max);
            let y_max = (top + 12.0 * top.sqrt() + 30.0).ceil() as u32;
            let mut pmf = vec![0.0; y_max as usize + 1];
            for &rate in &rates {
                for (y, slot) in pmf.iter_mut().enumerate() {
                    *slot += crate::dist::poisson_log_pmf(y as u32, rate)?.exp();
                }
            }
            for slot in &mut pmf {
                *slot /= rates.len() as f64;
            }
            let mass: f64 = pmf.iter().sum();
            let mut order: Vec<usize> = (0..pmf.len()).collect();
            order.sort_by(|&i, &j| pmf[j].total_cmp(&pmf[i]).then(i.cmp(&j)));
            let mut selected = 0.0;
            let mut lo = u32::MAX;
            let mut hi = 0u32;
            for &y in &order {
                selected += pmf[y];
                lo = lo.min(y as u32);
                hi = hi.max(y as u32);
                if selected >= level * mass.min(1.0) {
                    break;
                }
            }
            Ok(PredictiveTraceRow { t: t + 1, y: series.value(design.target, t), mean, lo, hi })
        })
        .collect()
}

/// One replicate's score for one (scenario, model) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub scenario: String,
    pub model: String,
    pub replicate: usize,
    pub score: f64,
}

/// Aggregated comparison row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub scenario: String,
    pub model: String,
    pub replicates: usize,
    pub mean: f64,
    pub sd: f64,
    pub winner: bool,
}

/// Means and sample standard deviations across replicates, with the
/// best-scoring model flagged per scenario.
pub fn comparison_report(entries: &[ScoreEntry]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for e in entries {
        groups.entry((e.scenario.clone(), e.model.clone())).or_default().push(e.score);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|((scenario, model), scores)| {
            let n = scores.len();
            let mean = scores.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            };
            ReportRow { scenario, model, replicates: n, mean, sd, winner: false }
        })
        .collect();
    let mut best: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        match best.get(&row.scenario) {
            Some(&(m, _)) if m <= row.mean => {}
            _ => {
                best.insert(row.scenario.clone(), (row.mean, i));
            }
        }
    }
    for (_, (_, i)) in best {
        rows[i].winner = true;
    }
    rows
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("scenario,model,replicates,mean,sd,winner\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3},{:.3},{}\n",
            r.scenario, r.model, r.replicates, r.mean, r.sd, r.winner
        ));
    }
    out
}

/// Aligned-text rendering of the comparison table.
pub fn report_text(rows: &[ReportRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:<10} {:>4} {:>10} {:>8}  {}\n",
        "scenario", "model", "n", "mean", "sd", "best"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<14} {:<10} {:>4} {:>10.3} {:>8.3}  {}\n",
            r.scenario,
            r.model,
            r.replicates,
            r.mean,
            r.sd,
            if r.winner { "*" } else { "" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{poisson_log_pmf, sample_poisson, stream_rng};
    use crate::gibbs::transition_pmf;
    use crate::lags::Partition;
    use rand::Rng;

    #[test]
    fn score_examples() {
        let single = vec![vec![(-2.0f64).exp()]];
        let r = log_predictive_score(&single).unwrap();
        assert!((r.score - 2.0).abs() < 1e-12);
        assert_eq!(r.floored, 0);

        let perfect = vec![vec![1.0; 4]; 3];
        let r = log_predictive_score(&perfect).unwrap();
        assert_eq!(r.score, 0.0);

        let with_zero = vec![vec![0.0, 0.5]];
        let r = log_predictive_score(&with_zero).unwrap();
        assert_eq!(r.floored, 1);
        assert!(r.score > 300.0, "floored score {}", r.score);

        assert!(log_predictive_score(&[]).is_err());
        assert!(log_predictive_score(&[vec![]]).is_err());
        assert!(log_predictive_score(&[vec![1.5]]).is_err());
    }

    #[test]
    fn score_is_permutation_invariant_and_duplicate_stable() {
        let mut rng = stream_rng(81, 0);
        let pmf: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..5).map(|_| rng.random::<f64>().max(1e-6)).collect())
            .collect();
        let base = log_predictive_score(&pmf).unwrap().score;

        let mut shuffled = pmf.clone();
        shuffled.reverse();
        for row in &mut shuffled {
            row.reverse();
        }
        assert!((log_predictive_score(&shuffled).unwrap().score - base).abs() < 1e-12);

        // duplicating the full draw set leaves the average unchanged
        let doubled: Vec<Vec<f64>> = pmf
            .iter()
            .map(|row| row.iter().chain(row.iter()).copied().collect())
            .collect();
        assert!((log_predictive_score(&doubled).unwrap().score - base).abs() < 1e-12);

        // bounded by the best and worst single-draw scores
        let per_draw: Vec<f64> = (0..5)
            .map(|i| {
                let cols: Vec<Vec<f64>> = pmf.iter().map(|row| vec![row[i]]).collect();
                log_predictive_score(&cols).unwrap().score
            })
            .collect();
        let best = per_draw.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = per_draw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(base >= best - 1e-12 && base <= worst + 1e-12);
    }

    #[test]
    fn score_approaches_poisson_cross_entropy() {
        // iid PD(4) predictive scored on PD(5) data: the empirical average
        // of -ln PD(y; 4) converges to the cross-entropy
        let mut rng = stream_rng(82, 0);
        let n = 20_000;
        let pmf: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let y = sample_poisson(5.0, &mut rng).unwrap();
                vec![poisson_log_pmf(y, 4.0).unwrap().exp()]
            })
            .collect();
        let score = log_predictive_score(&pmf).unwrap().score;
        let cross_entropy: f64 = (0..200)
            .map(|y| {
                let p = poisson_log_pmf(y, 5.0).unwrap().exp();
                -p * poisson_log_pmf(y, 4.0).unwrap()
            })
            .sum();
        assert!((score - cross_entropy).abs() < 0.05, "{score} vs {cross_entropy}");
    }

    fn degenerate_btf_setup() -> (CellSpace, Vec<Predictor>, Vec<PosteriorDraw>) {
        let cells = CellSpace::new(vec![1], 100).unwrap();
        let predictors = vec![Predictor { series: 0, lag: 1, levels: 2 }];
        let draws = [2.0, 3.0]
            .iter()
            .map(|&rate| PosteriorDraw {
                pistar: vec![1.0],
                lambdastar: vec![rate],
                v: vec![1.0],
                zstar: vec![0],
                pi: vec![vec![vec![1.0], vec![1.0]]],
            })
            .collect();
        (cells, predictors, draws)
    }

    #[test]
    fn degenerate_btf_scores_like_poisson_mixture() {
        // all k_j = 1: scoring reduces to averaging -ln PD(y; lambda_i)
        let (cells, predictors, draws) = degenerate_btf_setup();
        let rules = vec![LabelRule { rates: vec![1.0, 10.0] }];
        let series = CountSeries::univariate(vec![1, 2, 3, 4, 2, 5, 1, 0]).unwrap();
        let split = crate::data::make_split(8, 2, 4, 1).unwrap();
        let score = score_btf(&cells, &predictors, &draws, &rules, &series, &split, 0)
            .unwrap()
            .score;
        let mut expect = 0.0;
        for t in 6..8 {
            for rate in [2.0, 3.0] {
                expect -= poisson_log_pmf(series.value(0, t), rate).unwrap();
            }
        }
        expect /= 4.0;
        assert!((score - expect).abs() < 1e-12, "{score} vs {expect}");
    }

    /// Slow reference re-implementation on a 5-point test set: recompute
    /// labels, contexts and the mixture sum from first principles.
    #[test]
    fn score_btf_matches_reference_implementation() {
        let mut rng = stream_rng(83, 0);
        let series = CountSeries::univariate(
            (0..30).map(|_| sample_poisson(6.0, &mut rng).unwrap()).collect(),
        )
        .unwrap();
        let split = crate::data::make_split(30, 10, 15, 2).unwrap();
        let rules = vec![LabelRule { rates: vec![3.0, 9.0] }];
        let ctx = crate::lags::Contexts::training(&series, &split, &rules, 0).unwrap();
        let parts = vec![
            Partition::from_assign(&[0, 1]).unwrap(),
            Partition::single(2),
        ];
        let model = crate::gibbs::BtfModel::new(
            &ctx,
            &parts,
            crate::gibbs::GibbsHyper { gamma: 0.1, a: 3.0, b: 1.0, alpha0: 1.0, l: 8 },
            1_000_000,
        )
        .unwrap();
        let draws = crate::gibbs::run_chain_seeded(&model, 30, 12, 1, stream_rng(84, 0)).unwrap();
        let fast =
            score_btf(&model.cells, &model.predictors, &draws, &rules, &series, &split, 0)
                .unwrap()
                .score;

        // reference: explicit loops, labels recomputed per point
        let mut total = 0.0;
        let mut count = 0.0;
        for t in split.test_targets() {
            let y = series.value(0, t);
            for draw in &draws {
                let mut p = 0.0;
                for cell in 0..model.cells.size() {
                    let tuple = model.cells.decode(cell).unwrap();
                    let mut w = 1.0;
                    for (pr, pred) in model.predictors.iter().enumerate() {
                        let lagged = series.value(pred.series, t - pred.lag);
                        let label = rules[pred.series].label(lagged);
                        w *= draw.pi[pr][label][tuple[pr] as usize - 1];
                    }
                    let lambda = draw.lambdastar[draw.zstar[cell as usize] as usize];
                    p += w * poisson_log_pmf(y, lambda).unwrap().exp();
                }
                total -= p.ln();
                count += 1.0;
            }
        }
        let reference = total / count;
        assert!((fast - reference).abs() < 1e-10, "{fast} vs {reference}");
    }

    #[test]
    fn unseen_test_counts_score_finite() {
        let (cells, predictors, draws) = degenerate_btf_setup();
        let rules = vec![LabelRule { rates: vec![1.0, 10.0] }];
        // the test segment contains a count far beyond anything earlier
        let series = CountSeries::univariate(vec![1, 2, 3, 4, 2, 5, 1, 90]).unwrap();
        let split = crate::data::make_split(8, 2, 4, 1).unwrap();
        let r = score_btf(&cells, &predictors, &draws, &rules, &series, &split, 0).unwrap();
        assert!(r.score.is_finite());
    }

    #[test]
    fn par_score_degenerate_model() {
        let series = CountSeries::univariate(vec![2, 1, 0, 3, 2, 4, 1, 2]).unwrap();
        let split = crate::data::make_split(8, 2, 4, 1).unwrap();
        let design = ParDesign::univariate(1);
        // beta = 0: the model is PD(1) everywhere
        let score = score_par(&design, &[vec![0.0, 0.0]], &series, &split).unwrap().score;
        let expect = -(poisson_log_pmf(series.value(0, 6), 1.0).unwrap()
            + poisson_log_pmf(series.value(0, 7), 1.0).unwrap())
            / 2.0;
        assert!((score - expect).abs() < 1e-12);
    }

    #[test]
    fn btf_trace_interval_contains_mean() {
        let (cells, predictors, draws) = degenerate_btf_setup();
        let rules = vec![LabelRule { rates: vec![1.0, 10.0] }];
        let series = CountSeries::univariate(vec![1, 2, 3, 4, 2, 5, 1, 3]).unwrap();
        let split = crate::data::make_split(8, 2, 4, 1).unwrap();
        let rows = btf_predictive_trace(
            &cells, &predictors, &draws, &rules, &series, &split, 0, 0.95,
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.lo as f64 <= row.mean && row.mean <= row.hi as f64);
            assert!((row.mean - 2.5).abs() < 1e-12, "mean of the two rates");
        }
        // consistency with the transition pmf route
        let p = transition_pmf(&cells, &draws[0], &[0], 2).unwrap();
        assert!((p - poisson_log_pmf(2, 2.0).unwrap().exp()).abs() < 1e-14);
    }

    #[test]
    fn report_aggregates_and_flags_winner() {
        let entries = vec![
            ScoreEntry { scenario: "s".into(), model: "par".into(), replicate: 0, score: 1.0 },
            ScoreEntry { scenario: "s".into(), model: "par".into(), replicate: 1, score: 3.0 },
            ScoreEntry { scenario: "s".into(), model: "btf".into(), replicate: 0, score: 1.5 },
            ScoreEntry { scenario: "s".into(), model: "btf".into(), replicate: 1, score: 1.6 },
        ];
        let rows = comparison_report(&entries);
        assert_eq!(rows.len(), 2);
        let par = rows.iter().find(|r| r.model == "par").unwrap();
        assert_eq!(par.replicates, 2);
        assert!((par.mean - 2.0).abs() < 1e-12);
        assert!((par.sd - 2.0f64.sqrt()).abs() < 1e-12);
        let btf = rows.iter().find(|r| r.model == "btf").unwrap();
        assert!(btf.winner && !par.winner);

        // single replicate: sd printed as 0.000
        let single = comparison_report(&entries[..1]);
        assert_eq!(single[0].sd, 0.0);
        assert!(report_csv(&single).contains(",1.000,0.000,"));
    }

    #[test]
    fn report_format_is_stable() {
        let entries = vec![
            ScoreEntry { scenario: "table2-F".into(), model: "btf".into(), replicate: 0, score: 3.772 },
            ScoreEntry { scenario: "table2-F".into(), model: "par-bic".into(), replicate: 0, score: 5.338 },
        ];
        let rows = comparison_report(&entries);
        let csv = report_csv(&rows);
        assert_eq!(
            csv,
            "scenario,model,replicates,mean,sd,winner\n\
             table2-F,btf,1,3.772,0.000,true\n\
             table2-F,par-bic,1,5.338,0.000,false\n"
        );
        let text = report_text(&rows);
        assert!(text.contains("btf"));
        assert!(text.lines().count() == 3);
    }
}
