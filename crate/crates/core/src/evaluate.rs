//! Classification performance measures against ground-truth labels.
//!
//! Detector output is compared cell-by-cell with the generator's truth grid.
//! Overall evaluation treats any anomaly type as positive; by-type evaluation
//! restricts positives to one type, keeps every truth-clean cell as a
//! negative, and excludes cells carrying a different type, so specificity is
//! shared across the per-type rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{AnomalyLabels, CellFlag};
use crate::simulate::AnomalyType;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction grid is {pred_sites}×{pred_times} but truth grid is {truth_sites}×{truth_times}")]
    MisalignedLabels {
        pred_sites: usize,
        pred_times: usize,
        truth_sites: usize,
        truth_times: usize,
    },
}

/// Confusion counts plus the derived rates. Rates with an empty denominator
/// are 0 by convention, matching the zero-marginal rule for `mcc`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    /// Sensitivity TP/(TP+FN).
    pub se: f64,
    /// Specificity TN/(TN+FP).
    pub sp: f64,
    /// Accuracy (TP+TN)/total.
    pub acc: f64,
    /// Balanced accuracy (se+sp)/2.
    pub acc_adj: f64,
    /// Matthews correlation coefficient with the square-root denominator;
    /// 0 when any marginal sum is zero.
    pub mcc: f64,
    /// Mean squared difference between scores and binary truth; `None` when
    /// the metrics were built from counts alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
}

impl ConfusionMetrics {
    /// Derive all rates from raw counts. `brier` is left unset.
    pub fn from_counts(
        true_positives: usize,
        false_positives: usize,
        true_negatives: usize,
        false_negatives: usize,
    ) -> Self {
        let (tp, fp, tn, fn_) = (
            true_positives as f64,
            false_positives as f64,
            true_negatives as f64,
            false_negatives as f64,
        );
        let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
        let se = ratio(tp, tp + fn_);
        let sp = ratio(tn, tn + fp);
        let acc = ratio(tp + tn, tp + tn + fp + fn_);
        let marginals = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        let mcc = if marginals.iter().any(|&m| m == 0.0) {
            0.0
        } else {
            (tp * tn - fp * fn_) / marginals.iter().product::<f64>().sqrt()
        };
        Self {
            true_positives,
            false_positives,
            true_negatives,
            false_negatives,
            se,
            sp,
            acc,
            acc_adj: (se + sp) / 2.0,
            mcc,
            brier: None,
        }
    }

    pub fn total(&self) -> usize {
        self.true_positives + self.false_positives + self.true_negatives + self.false_negatives
    }
}

/// Score detector flags against a truth grid. Cells the detector marked
/// missing are excluded; with `by_type`, cells carrying a different anomaly
/// type are excluded as well. `brier` is computed from the detector scores
/// over the included cells.
pub fn confusion(
    pred: &AnomalyLabels,
    truth: &DMatrix<Option<AnomalyType>>,
    by_type: Option<AnomalyType>,
) -> Result<ConfusionMetrics, EvalError> {
    if pred.flags.shape() != truth.shape() {
        return Err(EvalError::MisalignedLabels {
            pred_sites: pred.n_sites(),
            pred_times: pred.n_times(),
            truth_sites: truth.nrows(),
            truth_times: truth.ncols(),
        });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    let mut sq_err = 0.0;
    let mut n_scored = 0usize;
    for i in 0..truth.nrows() {
        for t in 0..truth.ncols() {
            if pred.flags[(i, t)] == CellFlag::Missing {
                continue;
            }
            let positive = match (by_type, truth[(i, t)]) {
                (None, cell) => cell.is_some(),
                (Some(ty), Some(cell)) if cell == ty => true,
                (Some(_), None) => false,
                (Some(_), Some(_)) => continue,
            };
            let flagged = pred.flags[(i, t)] == CellFlag::Anomalous;
            match (flagged, positive) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
            let target = if positive { 1.0 } else { 0.0 };
            sq_err += (pred.scores[(i, t)] - target).powi(2);
            n_scored += 1;
        }
    }
    let mut metrics = ConfusionMetrics::from_counts(tp, fp, tn, fn_);
    metrics.brier = Some(if n_scored > 0 {
        sq_err / n_scored as f64
    } else {
        0.0
    });
    Ok(metrics)
}

/// Mean squared difference between predicted probabilities and binary
/// outcomes. Panics if the slices disagree in length or a score leaves
/// [0, 1] — both are caller contract violations.
pub fn brier(scores: &[f64], truth: &[bool]) -> f64 {
    assert_eq!(scores.len(), truth.len(), "scores and truth must align");
    assert!(
        scores.iter().all(|s| (0.0..=1.0).contains(s)),
        "scores must lie in [0, 1]"
    );
    if scores.is_empty() {
        return 0.0;
    }
    let sum: f64 = scores
        .iter()
        .zip(truth)
        .map(|(&f, &o)| (f - if o { 1.0 } else { 0.0 }).powi(2))
        .sum();
    sum / scores.len() as f64
}
