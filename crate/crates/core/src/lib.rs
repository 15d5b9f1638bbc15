//! Anomaly detection for spatio-temporal sensor data on stream networks.
//!
//! The crate fits a Bayesian VAR(1) spatial model over a stream-network
//! covariance and layers unsupervised detectors on top of it, plus a
//! preprocessing chain for raw sensor level data, a recursive batch-fitting
//! scheme, and a synthetic benchmark harness.

pub mod benchmark;
pub mod covariance;
pub mod detectors;
pub mod evaluate;
pub mod impale;
pub mod io;
pub mod model;
pub mod network;
pub mod recursive;
pub mod simulate;
pub mod stats;

pub use benchmark::{BenchmarkConfig, BenchmarkReport};
pub use covariance::SpatialCovParams;
pub use detectors::{AnomalyLabels, CellFlag, DetectorMethod};
pub use evaluate::ConfusionMetrics;
pub use impale::{EventLabels, SiteClustering};
pub use io::IoError;
pub use recursive::{BatchState, RecursiveConfig};
pub use simulate::{AnomalyType, LabeledDataset, SimConfig};
pub use model::{
    McmcConfig, ModelParams, ObservationSet, PosteriorSamples, PredictiveSummary, PriorSpec,
    ResidualSeries,
};
pub use network::{Segment, SitePlacement, StreamNetwork};
