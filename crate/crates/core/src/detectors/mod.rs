//! Unsupervised anomaly detectors over model output: posterior-predictive
//! interval exceedance, finite Gaussian mixtures on residuals, hidden Markov
//! models on residuals, and a per-site ARIMA benchmark.

mod arima;
mod hmm;
pub(crate) mod hmm_core;
mod mixture;
mod ppd;

pub use arima::detect_arima;
pub use hmm::{detect_hmm, HmmFit};
pub use hmm_core::forward_log_likelihood;
pub use mixture::{detect_mixture, MixtureFit};
pub use ppd::detect_ppd;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("model refit during second-pass detection failed: {0}")]
    RefitFailed(#[from] ModelError),
    #[error("EM did not converge in {iters} iterations (last log-likelihood change {delta:e})")]
    EmNotConverged { iters: usize, delta: f64 },
    #[error("mixture component collapsed onto a single point")]
    DegenerateComponent,
    #[error("Baum–Welch did not converge in {iters} iterations")]
    BaumWelchNotConverged { iters: usize },
    #[error("state emission distribution is singular")]
    SingularEmission,
    #[error("every candidate model failed for site row {site}")]
    AllModelsFailed { site: usize },
    #[error("invalid detector input: {0}")]
    InvalidInput(String),
}

/// Detector identity, carried on every label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMethod {
    Ppd,
    Mixture,
    Hmm,
    Arima,
}

impl DetectorMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            DetectorMethod::Ppd => "ppd",
            DetectorMethod::Mixture => "mixture",
            DetectorMethod::Hmm => "hmm",
            DetectorMethod::Arima => "arima",
        }
    }
}

impl std::fmt::Display for DetectorMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectorMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppd" => Ok(DetectorMethod::Ppd),
            "mixture" => Ok(DetectorMethod::Mixture),
            "hmm" => Ok(DetectorMethod::Hmm),
            "arima" => Ok(DetectorMethod::Arima),
            other => Err(format!(
                "unknown detector method '{other}' (expected ppd, mixture, hmm, or arima)"
            )),
        }
    }
}

/// Per-cell detector verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellFlag {
    Normal,
    Anomalous,
    /// No observation at this cell; detectors never flag it.
    Missing,
}

/// Per-cell anomaly flags with probability-like scores in [0, 1].
///
/// Scores are NaN exactly at missing cells. A cell is flagged only when its
/// score reaches `threshold`, so downstream consumers can re-threshold.
#[derive(Debug, Clone)]
pub struct AnomalyLabels {
    pub flags: DMatrix<CellFlag>,
    pub scores: DMatrix<f64>,
    pub method: DetectorMethod,
    /// 1 for single-pass detection, 2 when flags from a refit pass were
    /// merged in.
    pub iteration: u8,
    /// Score level at/above which cells were flagged.
    pub threshold: f64,
}

impl AnomalyLabels {
    pub fn n_sites(&self) -> usize {
        self.flags.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.flags.ncols()
    }

    pub fn is_anomalous(&self, site: usize, t: usize) -> bool {
        self.flags[(site, t)] == CellFlag::Anomalous
    }

    pub fn n_flagged(&self) -> usize {
        self.flags
            .iter()
            .filter(|f| **f == CellFlag::Anomalous)
            .count()
    }

    /// Fraction of non-missing cells flagged anomalous.
    pub fn flag_rate(&self) -> f64 {
        let observed = self
            .flags
            .iter()
            .filter(|f| **f != CellFlag::Missing)
            .count();
        if observed == 0 {
            0.0
        } else {
            self.n_flagged() as f64 / observed as f64
        }
    }

    pub fn flagged_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for t in 0..self.n_times() {
            for s in 0..self.n_sites() {
                if self.flags[(s, t)] == CellFlag::Anomalous {
                    cells.push((s, t));
                }
            }
        }
        cells
    }

    /// Checks the structural invariants: scores defined exactly at
    /// non-missing cells, flagged cells at/above threshold.
    pub fn validate(&self) -> Result<(), DetectorError> {
        if self.flags.shape() != self.scores.shape() {
            return Err(DetectorError::InvalidInput(
                "flag and score shapes differ".into(),
            ));
        }
        for t in 0..self.n_times() {
            for s in 0..self.n_sites() {
                let score = self.scores[(s, t)];
                match self.flags[(s, t)] {
                    CellFlag::Missing => {
                        if !score.is_nan() {
                            return Err(DetectorError::InvalidInput(format!(
                                "missing cell ({s},{t}) has a score"
                            )));
                        }
                    }
                    flag => {
                        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
                            return Err(DetectorError::InvalidInput(format!(
                                "cell ({s},{t}) score {score} outside [0,1]"
                            )));
                        }
                        if flag == CellFlag::Anomalous && score < self.threshold - 1e-12 {
                            return Err(DetectorError::InvalidInput(format!(
                                "cell ({s},{t}) flagged below threshold: {score} < {}",
                                self.threshold
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
