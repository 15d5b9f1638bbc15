//! Posterior-predictive interval detector: flags observations falling
//! outside the central predictive interval, optionally refitting the model
//! with flagged cells held out and merging the two flag sets.

use nalgebra::DMatrix;

use super::{AnomalyLabels, CellFlag, DetectorError, DetectorMethod};
use crate::model::{ModelError, PredictiveSummary};

/// Flags observations outside the central `level` predictive interval.
///
/// With `iterations = 2`, first-pass flags are set missing, the model is
/// refit through `refit` (which receives the cells to hold out and returns
/// the new predictive summary), and the union of both flag sets is returned.
/// The refit is skipped when the first pass flags nothing — holding out an
/// empty set would reproduce the first fit exactly.
///
/// The score at each observed cell is |2F(y) − 1| where F is the predictive
/// CDF, so `score > level` is exactly interval exceedance.
pub fn detect_ppd<F>(
    summary: &PredictiveSummary,
    level: f64,
    iterations: u8,
    mut refit: F,
) -> Result<AnomalyLabels, DetectorError>
where
    F: FnMut(&[(usize, usize)]) -> Result<PredictiveSummary, ModelError>,
{
    if !(level > 0.0 && level < 1.0) {
        return Err(DetectorError::InvalidInput(format!(
            "interval level must lie in (0,1), got {level}"
        )));
    }
    if !(iterations == 1 || iterations == 2) {
        return Err(DetectorError::InvalidInput(format!(
            "iterations must be 1 or 2, got {iterations}"
        )));
    }

    let first = score_pass(summary, level)?;
    if iterations == 1 {
        return finish(first, level, 1);
    }

    let flagged: Vec<(usize, usize)> = flagged_cells(&first);
    if flagged.is_empty() {
        return finish(first, level, 2);
    }

    let refit_summary = refit(&flagged)?;
    if refit_summary.missing.shape() != summary.missing.shape() {
        return Err(DetectorError::InvalidInput(
            "refit summary shape differs from the original".into(),
        ));
    }
    let second = score_pass(&refit_summary, level)?;

    // Union of flags; per cell the stronger of the two scores. Cells held
    // out in the refit carry their first-pass score.
    let (s, t_len) = first.scores.shape();
    let mut merged = first;
    for t in 0..t_len {
        for i in 0..s {
            let s2 = second.scores[(i, t)];
            if s2.is_nan() {
                continue;
            }
            if merged.scores[(i, t)].is_nan() {
                // Observed only in the refit pass: impossible by
                // construction (the refit only removes cells), kept
                // defensive.
                continue;
            }
            if s2 > merged.scores[(i, t)] {
                merged.scores[(i, t)] = s2;
            }
            if second.flags[(i, t)] == CellFlag::Anomalous {
                merged.flags[(i, t)] = CellFlag::Anomalous;
            }
        }
    }
    finish(merged, level, 2)
}

struct Pass {
    flags: DMatrix<CellFlag>,
    scores: DMatrix<f64>,
}

fn score_pass(summary: &PredictiveSummary, level: f64) -> Result<Pass, DetectorError> {
    let (s, t_len) = summary.missing.shape();
    let mut flags = DMatrix::from_element(s, t_len, CellFlag::Normal);
    let mut scores = DMatrix::from_element(s, t_len, f64::NAN);
    for t in 0..t_len {
        for i in 0..s {
            if summary.missing[(i, t)] {
                flags[(i, t)] = CellFlag::Missing;
                continue;
            }
            let f = summary.obs_cdf[(i, t)];
            if !f.is_finite() {
                return Err(DetectorError::InvalidInput(format!(
                    "predictive CDF undefined at observed cell ({i},{t})"
                )));
            }
            let score = (2.0 * f - 1.0).abs().min(1.0);
            scores[(i, t)] = score;
            if score > level {
                flags[(i, t)] = CellFlag::Anomalous;
            }
        }
    }
    Ok(Pass { flags, scores })
}

fn flagged_cells(pass: &Pass) -> Vec<(usize, usize)> {
    let (s, t_len) = pass.flags.shape();
    let mut cells = Vec::new();
    for t in 0..t_len {
        for i in 0..s {
            if pass.flags[(i, t)] == CellFlag::Anomalous {
                cells.push((i, t));
            }
        }
    }
    cells
}

fn finish(pass: Pass, level: f64, iteration: u8) -> Result<AnomalyLabels, DetectorError> {
    let labels = AnomalyLabels {
        flags: pass.flags,
        scores: pass.scores,
        method: DetectorMethod::Ppd,
        iteration,
        threshold: level,
    };
    labels.validate()?;
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-built summary: `cdf[(s,t)]` drives the flags, NaN marks missing.
    fn summary_from_cdf(cdf: DMatrix<f64>) -> PredictiveSummary {
        let (s, t_len) = cdf.shape();
        let missing = DMatrix::from_fn(s, t_len, |i, t| cdf[(i, t)].is_nan());
        PredictiveSummary {
            mean: DMatrix::zeros(s, t_len),
            sd: DMatrix::from_element(s, t_len, 1.0),
            lower: DMatrix::from_element(s, t_len, -2.0),
            upper: DMatrix::from_element(s, t_len, 2.0),
            resid: DMatrix::zeros(s, t_len),
            obs_cdf: cdf,
            missing,
            level: 0.95,
        }
    }

    #[test]
    fn interior_observations_yield_zero_flags_and_skip_refit() {
        let cdf = DMatrix::from_row_slice(2, 3, &[0.5, 0.6, 0.4, 0.3, 0.7, f64::NAN]);
        let summary = summary_from_cdf(cdf);
        let labels = detect_ppd(&summary, 0.95, 2, |_| {
            panic!("refit must not run when nothing is flagged")
        })
        .unwrap();
        assert_eq!(labels.n_flagged(), 0);
        assert_eq!(labels.iteration, 2);
        assert_eq!(labels.flags[(1, 2)], CellFlag::Missing);
    }

    #[test]
    fn second_pass_unions_flags_and_keeps_stronger_scores() {
        // Cell (0,0) exceeds in pass one; cell (1,1) only in pass two.
        let cdf1 = DMatrix::from_row_slice(2, 2, &[0.999, 0.5, 0.5, 0.9]);
        let summary = summary_from_cdf(cdf1);
        let mut seen_holdout = Vec::new();
        let labels = detect_ppd(&summary, 0.95, 2, |held| {
            seen_holdout = held.to_vec();
            let mut cdf2 = DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.5, 0.995]);
            for &(i, t) in held {
                cdf2[(i, t)] = f64::NAN;
            }
            Ok(summary_from_cdf(cdf2))
        })
        .unwrap();
        assert_eq!(seen_holdout, vec![(0, 0)]);
        assert!(labels.is_anomalous(0, 0));
        assert!(labels.is_anomalous(1, 1));
        assert_eq!(labels.n_flagged(), 2);
        assert_eq!(labels.iteration, 2);
        // (0,0) keeps its first-pass score even though the refit held it out.
        assert!((labels.scores[(0, 0)] - (2.0 * 0.999 - 1.0)).abs() < 1e-12);
        // (1,1) takes the larger second-pass score.
        assert!((labels.scores[(1, 1)] - (2.0 * 0.995 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_pass_never_calls_refit() {
        let cdf = DMatrix::from_row_slice(1, 2, &[0.999, 0.5]);
        let labels = detect_ppd(&summary_from_cdf(cdf), 0.95, 1, |_| {
            panic!("single-pass detection must not refit")
        })
        .unwrap();
        assert_eq!(labels.n_flagged(), 1);
        assert_eq!(labels.iteration, 1);
    }

    #[test]
    fn refit_failure_is_surfaced() {
        let cdf = DMatrix::from_row_slice(1, 1, &[0.999]);
        let err = detect_ppd(&summary_from_cdf(cdf), 0.95, 2, |_| {
            Err(ModelError::InvalidConfig("boom".into()))
        })
        .unwrap_err();
        assert!(matches!(err, DetectorError::RefitFailed(_)));
    }

    #[test]
    fn rejects_bad_level_and_iterations() {
        let cdf = DMatrix::from_row_slice(1, 1, &[0.5]);
        let summary = summary_from_cdf(cdf);
        assert!(detect_ppd(&summary, 1.0, 1, |_| unreachable!()).is_err());
        assert!(detect_ppd(&summary, 0.95, 3, |_| unreachable!()).is_err());
    }
}
