//! Preprocessing chain for raw sensor level data: multivariate imputation,
//! DTW-based site clustering, and multivariate-HMM event identification.
//!
//! The three stages are independent; a typical pipeline imputes gaps first,
//! clusters sites to decide which group to model jointly, then labels each
//! time tick as ambient or event from a shared hidden chain.

mod cluster;
mod dtw;
mod events;
mod impute;

pub use cluster::{cluster_sites, Merge, SiteClustering};
pub use dtw::dtw_distance;
pub use events::{detect_events_mhmm, EventLabels, EventState};
pub use impute::impute_multivariate;

use thiserror::Error;

use crate::detectors::DetectorError;

/// Errors raised by the preprocessing stages.
#[derive(Debug, Error)]
pub enum ImpaleError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("series must be nonempty")]
    EmptySeries,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}
