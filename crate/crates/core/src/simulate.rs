//! Synthetic benchmark generator: spatio-temporal stream-network data with
//! injected anomalies and ground-truth labels.
//!
//! A dataset is assembled in four layers: a random stream network, a static
//! spatial field drawn from the tail-down covariance, a per-site stationary
//! AR(1) process with unit marginal variance, and cell-level N(0, 1) noise,
//! all on top of a linear covariate mean. Anomalies start at cells drawn
//! Bernoulli(`q_ini`), persist for 1 + Poisson(`lambda`) ticks (spikes are a
//! single tick), and add type-specific offsets to the observed series while
//! the clean series is kept for scoring.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{total_covariance, CovarianceError, SpatialCovParams};
use crate::model::{ModelError, ObservationSet};
use crate::network::{NetworkError, StreamNetwork};

/// Errors raised while validating or running the generator.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anomaly classes the generator can inject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyType {
    /// Single-tick positive offset, N(mean, sd²) with a large mean.
    Spike,
    /// Window of high-variance offsets, N(mean, sd²) with a large sd.
    HighVar,
    /// Window of near-constant offsets, fresh N(mean, sd²) per tick.
    Shift,
    /// Window of offsets sorted ascending so the series ramps upward.
    Drift,
}

impl AnomalyType {
    pub const ALL: [AnomalyType; 4] = [
        AnomalyType::Spike,
        AnomalyType::HighVar,
        AnomalyType::Shift,
        AnomalyType::Drift,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyType::Spike => "spike",
            AnomalyType::HighVar => "high_var",
            AnomalyType::Shift => "shift",
            AnomalyType::Drift => "drift",
        }
    }
}

impl fmt::Display for AnomalyType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnomalyType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spike" => Ok(AnomalyType::Spike),
            "high_var" => Ok(AnomalyType::HighVar),
            "shift" => Ok(AnomalyType::Shift),
            "drift" => Ok(AnomalyType::Drift),
            other => Err(format!(
                "unknown anomaly type '{other}' (expected spike, high_var, shift, or drift)"
            )),
        }
    }
}

/// Normal magnitude distribution for one anomaly type's offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Magnitude {
    pub mean: f64,
    pub sd: f64,
}

impl Magnitude {
    pub fn new(mean: f64, sd: f64) -> Self {
        Self { mean, sd }
    }
}

/// Per-type offset distributions. Spikes, shifts, and drifts default to a
/// large mean with small spread; high-variance windows default to a small
/// mean with large spread.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MagnitudeTable {
    pub spike: Magnitude,
    pub high_var: Magnitude,
    pub shift: Magnitude,
    pub drift: Magnitude,
}

impl Default for MagnitudeTable {
    fn default() -> Self {
        Self {
            spike: Magnitude::new(5.0, 1.0),
            high_var: Magnitude::new(1.0, 5.0),
            shift: Magnitude::new(5.0, 1.0),
            drift: Magnitude::new(5.0, 1.0),
        }
    }
}

impl MagnitudeTable {
    pub fn get(&self, ty: AnomalyType) -> Magnitude {
        match ty {
            AnomalyType::Spike => self.spike,
            AnomalyType::HighVar => self.high_var,
            AnomalyType::Shift => self.shift,
            AnomalyType::Drift => self.drift,
        }
    }
}

/// Full generator configuration. `Default` reproduces the benchmark
/// defaults: 150 segments, 30 sites, 120 ticks, β = (10, 1, 0, −1),
/// tail-down σ² = 3 at range 10 with nugget 0.1, φ = 0.8, q_ini = 0.05,
/// λ = 0.8, all four anomaly types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_segments: usize,
    pub n_sites: usize,
    /// Number of time ticks (≥ 2).
    pub t_len: usize,
    /// Mean coefficients; the first entry multiplies the intercept column.
    pub beta: Vec<f64>,
    pub spatial: SpatialCovParams,
    /// AR(1) coefficient of the temporal process (|φ| < 1).
    pub phi: f64,
    /// Per-cell probability that an anomaly starts there.
    pub q_ini: f64,
    /// Persistence rate: windows last 1 + Poisson(λ) ticks.
    pub lambda: f64,
    pub anomaly_types: Vec<AnomalyType>,
    pub magnitudes: MagnitudeTable,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_segments: 150,
            n_sites: 30,
            t_len: 120,
            beta: vec![10.0, 1.0, 0.0, -1.0],
            spatial: SpatialCovParams::taildown_only(3.0, 10.0, 0.1),
            phi: 0.8,
            q_ini: 0.05,
            lambda: 0.8,
            anomaly_types: AnomalyType::ALL.to_vec(),
            magnitudes: MagnitudeTable::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_segments == 0 {
            return Err(SimError::InvalidConfig("n_segments must be ≥ 1".into()));
        }
        if self.n_sites == 0 {
            return Err(SimError::InvalidConfig("n_sites must be ≥ 1".into()));
        }
        if self.t_len < 2 {
            return Err(SimError::InvalidConfig("t_len must be ≥ 2".into()));
        }
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(SimError::InvalidConfig(
                "beta must be non-empty and finite".into(),
            ));
        }
        self.spatial.validate().map_err(SimError::Covariance)?;
        if !self.phi.is_finite() || self.phi.abs() >= 1.0 {
            return Err(SimError::InvalidConfig(
                "phi must satisfy |phi| < 1 for a stationary temporal process".into(),
            ));
        }
        if !self.q_ini.is_finite() || !(0.0..1.0).contains(&self.q_ini) {
            return Err(SimError::InvalidConfig("q_ini must lie in [0, 1)".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(SimError::InvalidConfig("lambda must be ≥ 0".into()));
        }
        if self.q_ini > 0.0 && self.anomaly_types.is_empty() {
            return Err(SimError::InvalidConfig(
                "q_ini > 0 requires at least one anomaly type".into(),
            ));
        }
        for (i, a) in self.anomaly_types.iter().enumerate() {
            if self.anomaly_types[..i].contains(a) {
                return Err(SimError::InvalidConfig(
                    "anomaly_types must be distinct".into(),
                ));
            }
        }
        for ty in AnomalyType::ALL {
            let m = self.magnitudes.get(ty);
            if !m.mean.is_finite() || !m.sd.is_finite() || m.sd < 0.0 {
                return Err(SimError::InvalidConfig(format!(
                    "magnitude for {ty} must be finite with sd ≥ 0"
                )));
            }
        }
        Ok(())
    }
}

/// One injected anomaly window: `len` consecutive ticks on one site,
/// beginning at the start cell that seeded it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectedWindow {
    pub site: usize,
    pub t0: usize,
    pub len: usize,
    pub ty: AnomalyType,
}

/// A simulated dataset with ground truth attached.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// Contaminated observations — the input detectors see.
    pub observed: ObservationSet,
    /// Anomaly-free series (S×T), equal to the observed values wherever
    /// `truth` is `None`.
    pub clean: DMatrix<f64>,
    /// Per-cell anomaly type, `None` for clean cells.
    pub truth: DMatrix<Option<AnomalyType>>,
    /// Raw Bernoulli(q_ini) start indicator per cell, including draws that
    /// fell inside an earlier window and were absorbed by it.
    pub starts: DMatrix<bool>,
    /// Effective windows after first-writer-wins overlap resolution,
    /// pairwise disjoint within each site.
    pub windows: Vec<InjectedWindow>,
    pub network: StreamNetwork,
}

impl LabeledDataset {
    pub fn n_sites(&self) -> usize {
        self.clean.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.clean.ncols()
    }

    /// Cell-level boolean truth: true where any anomaly type applies.
    pub fn truth_mask(&self) -> DMatrix<bool> {
        self.truth.map(|t| t.is_some())
    }
}

// RNG stream ids for the independent draw stages. The network generator owns
// stream 0 and model fitting uses streams 1..=n_chains, so data streams start
// above those.
const STREAM_COVARIATES: u64 = 11;
const STREAM_SPATIAL: u64 = 12;
const STREAM_TEMPORAL: u64 = 13;
const STREAM_ANOMALY: u64 = 14;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stationary AR(1) series with unit marginal variance: the first value is
/// N(0, 1) and innovations are scaled by sqrt(1 − φ²).
fn ar1_series(rng: &mut ChaCha8Rng, phi: f64, t_len: usize) -> Vec<f64> {
    let innov_sd = (1.0 - phi * phi).sqrt();
    let mut out = Vec::with_capacity(t_len);
    let mut prev: f64 = rng.sample(StandardNormal);
    out.push(prev);
    for _ in 1..t_len {
        let z: f64 = rng.sample(StandardNormal);
        prev = phi * prev + innov_sd * z;
        out.push(prev);
    }
    out
}

/// Generate a labeled dataset: random network, clean series, then injected
/// anomalies. Identical configs (including seed) produce identical output.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<LabeledDataset, SimError> {
    cfg.validate()?;
    let s = cfg.n_sites;
    let t_len = cfg.t_len;
    let p = cfg.beta.len();

    let network = StreamNetwork::generate_random(cfg.n_segments, s, cfg.seed)?;

    // Covariates: intercept column plus fresh standard normals per cell.
    let mut rng_x = stream_rng(cfg.seed, STREAM_COVARIATES);
    let mut x: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    for _ in 0..t_len {
        let mut xt = DMatrix::zeros(s, p);
        for i in 0..s {
            xt[(i, 0)] = 1.0;
            for j in 1..p {
                xt[(i, j)] = rng_x.sample(StandardNormal);
            }
        }
        x.push(xt);
    }

    // Static spatial field v ~ N(0, Σ) via the Cholesky factor.
    let sigma = total_covariance(&network, &cfg.spatial)?;
    let chol = Cholesky::new(sigma).ok_or_else(|| {
        SimError::InvalidConfig("spatial covariance is not positive definite".into())
    })?;
    let mut rng_v = stream_rng(cfg.seed, STREAM_SPATIAL);
    let z = DVector::from_fn(s, |_, _| rng_v.sample::<f64, _>(StandardNormal));
    let v = chol.l() * z;

    // Clean series: covariate mean + spatial field + AR(1) + white noise.
    let beta = DVector::from_column_slice(&cfg.beta);
    let mut rng_t = stream_rng(cfg.seed, STREAM_TEMPORAL);
    let mut clean = DMatrix::zeros(s, t_len);
    for i in 0..s {
        let ar = ar1_series(&mut rng_t, cfg.phi, t_len);
        for (t, ar_t) in ar.iter().enumerate() {
            let mean = x[t].row(i).transpose().dot(&beta);
            let eps: f64 = rng_t.sample(StandardNormal);
            clean[(i, t)] = mean + v[i] + ar_t + eps;
        }
    }

    // Anomaly starts are drawn for every cell up front; a start falling
    // inside an earlier window is absorbed by it (first-writer-wins).
    let mut rng_a = stream_rng(cfg.seed, STREAM_ANOMALY);
    let mut starts = DMatrix::from_element(s, t_len, false);
    for i in 0..s {
        for t in 0..t_len {
            starts[(i, t)] = rng_a.random::<f64>() < cfg.q_ini;
        }
    }

    let mut observed = clean.clone();
    let mut truth: DMatrix<Option<AnomalyType>> = DMatrix::from_element(s, t_len, None);
    let mut windows = Vec::new();
    for i in 0..s {
        for t in 0..t_len {
            if !starts[(i, t)] || truth[(i, t)].is_some() {
                continue;
            }
            let ty = cfg.anomaly_types[rng_a.random_range(0..cfg.anomaly_types.len())];
            let len = match ty {
                AnomalyType::Spike => 1,
                _ if cfg.lambda > 0.0 => {
                    let pois = Poisson::new(cfg.lambda).expect("validated lambda");
                    1 + rng_a.sample(pois) as usize
                }
                _ => 1,
            };
            let end = (t + len).min(t_len);
            let m = cfg.magnitudes.get(ty);
            let mut offsets: Vec<f64> = (t..end)
                .map(|_| m.mean + m.sd * rng_a.sample::<f64, _>(StandardNormal))
                .collect();
            if ty == AnomalyType::Drift {
                offsets.sort_by(|a, b| a.partial_cmp(b).expect("finite offsets"));
            }
            for (k, off) in offsets.iter().enumerate() {
                observed[(i, t + k)] += off;
                truth[(i, t + k)] = Some(ty);
            }
            windows.push(InjectedWindow {
                site: i,
                t0: t,
                len: end - t,
                ty,
            });
        }
    }

    let site_order: Vec<String> = network.sites().iter().map(|p| p.site_id.clone()).collect();
    let time_index: Vec<i64> = (0..t_len as i64).collect();
    let missing = DMatrix::from_element(s, t_len, false);
    let observation_set = ObservationSet::new(observed, missing, x, site_order, time_index)?;

    Ok(LabeledDataset {
        observed: observation_set,
        clean,
        truth,
        starts,
        windows,
        network,
    })
}
