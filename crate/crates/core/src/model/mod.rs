//! The VAR(1) spatio-temporal Gaussian model on a stream network:
//! observation container, parameters and priors, exact likelihood, adaptive
//! MCMC posterior sampling with latent missing values, and posterior
//! predictive summaries with empirical residuals.

mod likelihood;
mod mcmc;
mod predictive;

pub use likelihood::log_likelihood;
pub use mcmc::sample_posterior;
pub use predictive::posterior_predictive;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::covariance::{CovarianceError, SpatialCovParams};
use crate::network::StreamNetwork;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid observations: {0}")]
    InvalidObservations(String),
    #[error("response matrix contains missing values; complete them first or sample them in MCMC")]
    MissingValues,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Covariance(#[from] CovarianceError),
    #[error("invalid MCMC configuration: {0}")]
    InvalidConfig(String),
    #[error("chain diverged: block `{block}` rejected {window} consecutive proposals")]
    DivergentChain { block: String, window: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
}

/// Observed responses and covariates for S sites over T time ticks.
///
/// `y` is S×T with missing entries stored as NaN and tracked by `missing`;
/// `x[t]` is the S×p design matrix at tick t, whose first column is the
/// intercept. Covariates are never missing.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    y: DMatrix<f64>,
    missing: DMatrix<bool>,
    x: Vec<DMatrix<f64>>,
    site_order: Vec<String>,
    time_index: Vec<i64>,
}

impl ObservationSet {
    pub fn new(
        mut y: DMatrix<f64>,
        missing: DMatrix<bool>,
        x: Vec<DMatrix<f64>>,
        site_order: Vec<String>,
        time_index: Vec<i64>,
    ) -> Result<Self, ModelError> {
        let (s, t) = y.shape();
        if s == 0 || t == 0 {
            return Err(ModelError::InvalidObservations(
                "need at least one site and one time tick".into(),
            ));
        }
        if missing.shape() != (s, t) {
            return Err(ModelError::DimensionMismatch(format!(
                "missing mask is {:?}, expected {:?}",
                missing.shape(),
                (s, t)
            )));
        }
        if x.len() != t {
            return Err(ModelError::DimensionMismatch(format!(
                "{} design matrices for {} time ticks",
                x.len(),
                t
            )));
        }
        let p = x[0].ncols();
        if p == 0 {
            return Err(ModelError::InvalidObservations(
                "design matrices need at least the intercept column".into(),
            ));
        }
        for (tick, xt) in x.iter().enumerate() {
            if xt.shape() != (s, p) {
                return Err(ModelError::DimensionMismatch(format!(
                    "design matrix at tick {tick} is {:?}, expected {:?}",
                    xt.shape(),
                    (s, p)
                )));
            }
            for i in 0..s {
                if xt[(i, 0)] != 1.0 {
                    return Err(ModelError::InvalidObservations(format!(
                        "design column 0 must be the all-ones intercept (tick {tick}, site row {i})"
                    )));
                }
            }
            if xt.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidObservations(format!(
                    "non-finite covariate at tick {tick}"
                )));
            }
        }
        if site_order.len() != s {
            return Err(ModelError::DimensionMismatch(format!(
                "{} site ids for {} rows",
                site_order.len(),
                s
            )));
        }
        if time_index.len() != t {
            return Err(ModelError::DimensionMismatch(format!(
                "{} time ticks for {} columns",
                time_index.len(),
                t
            )));
        }
        if !time_index.windows(2).all(|w| w[0] < w[1]) {
            return Err(ModelError::InvalidObservations(
                "time index must be strictly increasing".into(),
            ));
        }
        {
            let mut seen = std::collections::HashSet::new();
            for id in &site_order {
                if !seen.insert(id) {
                    return Err(ModelError::InvalidObservations(format!(
                        "duplicate site id `{id}`"
                    )));
                }
            }
        }
        // Canonicalize: NaN exactly at missing cells.
        for i in 0..s {
            for j in 0..t {
                if missing[(i, j)] {
                    y[(i, j)] = f64::NAN;
                } else if !y[(i, j)].is_finite() {
                    return Err(ModelError::InvalidObservations(format!(
                        "non-finite response at site row {i}, tick {j} not marked missing"
                    )));
                }
            }
        }
        Ok(Self {
            y,
            missing,
            x,
            site_order,
            time_index,
        })
    }

    /// Builds a fully observed set.
    pub fn from_complete(
        y: DMatrix<f64>,
        x: Vec<DMatrix<f64>>,
        site_order: Vec<String>,
        time_index: Vec<i64>,
    ) -> Result<Self, ModelError> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), false);
        Self::new(y, mask, x, site_order, time_index)
    }

    pub fn n_sites(&self) -> usize {
        self.y.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.x[0].ncols()
    }

    /// Responses, NaN at missing cells.
    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn missing(&self) -> &DMatrix<bool> {
        &self.missing
    }

    pub fn is_missing(&self, site: usize, t: usize) -> bool {
        self.missing[(site, t)]
    }

    pub fn n_missing(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }

    /// Design matrix at tick `t` (S×p).
    pub fn x(&self, t: usize) -> &DMatrix<f64> {
        &self.x[t]
    }

    pub fn site_order(&self) -> &[String] {
        &self.site_order
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    /// All observed response values.
    pub fn observed_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..self.n_times() {
            for i in 0..self.n_sites() {
                if !self.missing[(i, j)] {
                    out.push(self.y[(i, j)]);
                }
            }
        }
        out
    }

    /// Copy with the given cells additionally marked missing.
    pub fn with_cells_missing(&self, cells: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        for &(s, t) in cells {
            out.missing[(s, t)] = true;
            out.y[(s, t)] = f64::NAN;
        }
        out
    }

    /// Copy restricted to time columns `[from, to)`.
    pub fn slice_times(&self, from: usize, to: usize) -> Self {
        assert!(from < to && to <= self.n_times());
        Self {
            y: self.y.columns(from, to - from).into_owned(),
            missing: self.missing.columns(from, to - from).into_owned(),
            x: self.x[from..to].to_vec(),
            site_order: self.site_order.clone(),
            time_index: self.time_index[from..to].to_vec(),
        }
    }

    /// Checks that rows align with the network's site ordering.
    pub(crate) fn check_alignment(&self, net: &StreamNetwork) -> Result<(), ModelError> {
        if net.n_sites() != self.n_sites() {
            return Err(ModelError::DimensionMismatch(format!(
                "network has {} sites, observations have {}",
                net.n_sites(),
                self.n_sites()
            )));
        }
        for (row, site) in net.sites().iter().enumerate() {
            if site.site_id != self.site_order[row] {
                return Err(ModelError::DimensionMismatch(format!(
                    "row {row} is `{}` but the network expects `{}`",
                    self.site_order[row], site.site_id
                )));
            }
        }
        Ok(())
    }
}

/// Full parameter vector θ of the VAR(1) spatial model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub beta: DVector<f64>,
    pub spatial: SpatialCovParams,
    /// Diagonal AR coefficients, one per site, each in (−1, 1).
    pub phi: DVector<f64>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.spatial.validate()?;
        if self.phi.iter().any(|p| !p.is_finite() || p.abs() >= 1.0) {
            return Err(ModelError::InvalidParams(
                "every AR coefficient must lie strictly inside (-1, 1)".into(),
            ));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::InvalidParams(
                "regression coefficients must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A univariate prior family. `Fixed` pins a parameter (excluding it from
/// sampling), which is also how inactive covariance components are switched
/// off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ParamPrior {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    /// Shape/rate parameterization on (0, ∞).
    Gamma { shape: f64, rate: f64 },
    /// atanh(x) ~ Normal(mean, sd); support (−1, 1).
    AtanhNormal { mean: f64, sd: f64 },
}

impl ParamPrior {
    pub fn validate(&self) -> Result<(), ModelError> {
        let ok = match *self {
            ParamPrior::Fixed { value } => value.is_finite(),
            ParamPrior::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            ParamPrior::Normal { mean, sd } | ParamPrior::AtanhNormal { mean, sd } => {
                mean.is_finite() && sd.is_finite() && sd > 0.0
            }
            ParamPrior::Gamma { shape, rate } => {
                shape.is_finite() && rate.is_finite() && shape > 0.0 && rate > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidPrior(format!("{self:?}")))
        }
    }

    /// Log prior density at `x`; −∞ outside the support. `Fixed` contributes
    /// nothing to Metropolis ratios (the parameter is never proposed).
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            ParamPrior::Fixed { .. } => 0.0,
            ParamPrior::Uniform { lo, hi } => {
                if x >= lo && x <= hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            ParamPrior::Normal { mean, sd } => crate::stats::norm_logpdf(x, mean, sd),
            ParamPrior::Gamma { shape, rate } => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    shape * rate.ln() - statrs::function::gamma::ln_gamma(shape)
                        + (shape - 1.0) * x.ln()
                        - rate * x
                }
            }
            ParamPrior::AtanhNormal { mean, sd } => {
                if x.abs() >= 1.0 {
                    f64::NEG_INFINITY
                } else {
                    crate::stats::norm_logpdf(x.atanh(), mean, sd) - (1.0 - x * x).ln()
                }
            }
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, ParamPrior::Fixed { .. })
    }

    /// A representative starting value inside the support.
    pub fn initial_value(&self) -> f64 {
        match *self {
            ParamPrior::Fixed { value } => value,
            ParamPrior::Uniform { lo, hi } => 0.5 * (lo + hi),
            ParamPrior::Normal { mean, .. } => mean,
            ParamPrior::Gamma { shape, rate } => shape / rate,
            ParamPrior::AtanhNormal { mean, .. } => mean.tanh(),
        }
    }
}

/// Priors for every model parameter. Covariance components are activated or
/// deactivated by giving their sills a proper prior or `Fixed {0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    /// One (normal or fixed) prior per regression coefficient.
    pub beta: Vec<ParamPrior>,
    pub sigma2_u: ParamPrior,
    pub alpha_u: ParamPrior,
    pub sigma2_d: ParamPrior,
    pub alpha_d: ParamPrior,
    pub sigma2_e: ParamPrior,
    pub alpha_e: ParamPrior,
    pub sigma2_0: ParamPrior,
    /// AR-coefficient priors: either one entry broadcast to every site or
    /// one entry per site.
    pub phi: Vec<ParamPrior>,
}

/// Which covariance components a default prior activates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovComponents {
    pub tailup: bool,
    pub taildown: bool,
    pub euclidean: bool,
}

impl Default for CovComponents {
    fn default() -> Self {
        // Tail-down captures dependence between all site pairs and is the
        // default single component.
        Self {
            tailup: false,
            taildown: true,
            euclidean: false,
        }
    }
}

impl PriorSpec {
    /// Default weakly informative priors sized from the data and network:
    /// β ~ N(0, 10²); sills uniform(0, 10·var(y)); ranges uniform(0, 4·max
    /// stream distance); nugget uniform(0, var(y)); φ uniform(−1, 1).
    /// Components not selected get their sill fixed at zero.
    pub fn default_for(
        obs: &ObservationSet,
        net: &StreamNetwork,
        components: CovComponents,
    ) -> Self {
        let var_y = crate::stats::variance(&obs.observed_values()).max(1e-6);
        let max_d = net.max_stream_distance().max(1e-6);
        let sill = ParamPrior::Uniform {
            lo: 0.0,
            hi: 10.0 * var_y,
        };
        let range = ParamPrior::Uniform {
            lo: 0.0,
            hi: 4.0 * max_d,
        };
        let off_sill = ParamPrior::Fixed { value: 0.0 };
        let off_range = ParamPrior::Fixed { value: 1.0 };
        let pick = |on: bool| -> (ParamPrior, ParamPrior) {
            if on {
                (sill, range)
            } else {
                (off_sill, off_range)
            }
        };
        let (sigma2_u, alpha_u) = pick(components.tailup);
        let (sigma2_d, alpha_d) = pick(components.taildown);
        let (sigma2_e, alpha_e) = pick(components.euclidean);
        Self {
            beta: vec![
                ParamPrior::Normal {
                    mean: 0.0,
                    sd: 10.0
                };
                obs.n_covariates()
            ],
            sigma2_u,
            alpha_u,
            sigma2_d,
            alpha_d,
            sigma2_e,
            alpha_e,
            sigma2_0: ParamPrior::Uniform { lo: 0.0, hi: var_y },
            phi: vec![ParamPrior::Uniform { lo: -1.0, hi: 1.0 }],
        }
    }

    /// The φ prior for a given site, honoring broadcast semantics.
    pub fn phi_prior(&self, site: usize, n_sites: usize) -> Result<&ParamPrior, ModelError> {
        match self.phi.len() {
            1 => Ok(&self.phi[0]),
            n if n == n_sites => Ok(&self.phi[site]),
            n => Err(ModelError::InvalidPrior(format!(
                "{n} AR-coefficient priors for {n_sites} sites (need 1 or {n_sites})"
            ))),
        }
    }

    pub fn validate(&self, n_covariates: usize, n_sites: usize) -> Result<(), ModelError> {
        if self.beta.len() != n_covariates {
            return Err(ModelError::InvalidPrior(format!(
                "{} coefficient priors for {} covariates",
                self.beta.len(),
                n_covariates
            )));
        }
        for b in &self.beta {
            b.validate()?;
            if !matches!(b, ParamPrior::Normal { .. } | ParamPrior::Fixed { .. }) {
                return Err(ModelError::InvalidPrior(
                    "coefficient priors must be normal or fixed (conjugate update)".into(),
                ));
            }
        }
        for p in [
            &self.sigma2_u,
            &self.alpha_u,
            &self.sigma2_d,
            &self.alpha_d,
            &self.sigma2_e,
            &self.alpha_e,
            &self.sigma2_0,
        ] {
            p.validate()?;
        }
        if self.phi.len() != 1 && self.phi.len() != n_sites {
            return Err(ModelError::InvalidPrior(format!(
                "{} AR-coefficient priors for {n_sites} sites (need 1 or {n_sites})",
                self.phi.len()
            )));
        }
        for p in &self.phi {
            p.validate()?;
        }
        Ok(())
    }
}

/// Sampler configuration. `iters` counts total sweeps per chain including
/// warmup; draws are recorded after warmup, every `thin`-th sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub chains: usize,
    pub iters: usize,
    pub warmup: usize,
    pub thin: usize,
    pub seed: u64,
    /// Optional initial random-walk scales per block name (e.g. "alpha_d",
    /// "phi3"); adaptation refines them during warmup.
    pub proposal_scales: Option<BTreeMap<String, f64>>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            iters: 1500,
            warmup: 500,
            thin: 1,
            seed: 0,
            proposal_scales: None,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.chains == 0 {
            return Err(ModelError::InvalidConfig("chains must be ≥ 1".into()));
        }
        if self.iters <= self.warmup {
            return Err(ModelError::InvalidConfig(format!(
                "iters ({}) must exceed warmup ({})",
                self.iters, self.warmup
            )));
        }
        if self.thin == 0 {
            return Err(ModelError::InvalidConfig("thin must be ≥ 1".into()));
        }
        if let Some(scales) = &self.proposal_scales {
            for (k, v) in scales {
                if !v.is_finite() || *v <= 0.0 {
                    return Err(ModelError::InvalidConfig(format!(
                        "proposal scale for `{k}` must be positive, got {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Kept draws per chain.
    pub fn kept_per_chain(&self) -> usize {
        (self.iters - self.warmup).div_ceil(self.thin)
    }
}

/// Posterior draws from all chains, stacked row-wise.
#[derive(Debug, Clone)]
pub struct PosteriorSamples {
    draws: DMatrix<f64>,
    param_names: Vec<String>,
    chain_ids: Vec<usize>,
    acceptance_rates: BTreeMap<String, f64>,
    imputed_y_draws: DMatrix<f64>,
    missing_cells: Vec<(usize, usize)>,
    n_covariates: usize,
    n_sites: usize,
    seed: u64,
}

impl PosteriorSamples {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        draws: DMatrix<f64>,
        param_names: Vec<String>,
        chain_ids: Vec<usize>,
        acceptance_rates: BTreeMap<String, f64>,
        imputed_y_draws: DMatrix<f64>,
        missing_cells: Vec<(usize, usize)>,
        n_covariates: usize,
        n_sites: usize,
        seed: u64,
    ) -> Self {
        Self {
            draws,
            param_names,
            chain_ids,
            acceptance_rates,
            imputed_y_draws,
            missing_cells,
            n_covariates,
            n_sites,
            seed,
        }
    }

    /// Number of retained draws across chains.
    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn draws(&self) -> &DMatrix<f64> {
        &self.draws
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn chain_ids(&self) -> &[usize] {
        &self.chain_ids
    }

    pub fn acceptance_rates(&self) -> &BTreeMap<String, f64> {
        &self.acceptance_rates
    }

    /// Draws of latent missing responses, aligned with `missing_cells`.
    pub fn imputed_y_draws(&self) -> &DMatrix<f64> {
        &self.imputed_y_draws
    }

    /// (site row, time tick) for each imputed-draw column.
    pub fn missing_cells(&self) -> &[(usize, usize)] {
        &self.missing_cells
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// All draws of one named parameter.
    pub fn param_draws(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.param_index(name)?;
        Some(self.draws.column(k).iter().cloned().collect())
    }

    pub fn posterior_mean(&self, name: &str) -> Option<f64> {
        self.param_draws(name).map(|d| crate::stats::mean(&d))
    }

    /// Central interval of one parameter at the given level.
    pub fn central_interval(&self, name: &str, level: f64) -> Option<(f64, f64)> {
        let mut d = self.param_draws(name)?;
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = crate::stats::quantile_sorted(&d, (1.0 - level) / 2.0);
        let hi = crate::stats::quantile_sorted(&d, (1.0 + level) / 2.0);
        Some((lo, hi))
    }

    /// Reassembles the full parameter vector of draw `m`.
    pub fn params_at(&self, m: usize) -> ModelParams {
        let row = self.draws.row(m);
        let p = self.n_covariates;
        let beta = DVector::from_iterator(p, (0..p).map(|j| row[j]));
        let spatial = SpatialCovParams {
            sigma2_u: row[p],
            alpha_u: row[p + 1],
            sigma2_d: row[p + 2],
            alpha_d: row[p + 3],
            sigma2_e: row[p + 4],
            alpha_e: row[p + 5],
            sigma2_0: row[p + 6],
        };
        let phi = DVector::from_iterator(
            self.n_sites,
            (0..self.n_sites).map(|s| row[p + 7 + s]),
        );
        ModelParams {
            beta,
            spatial,
            phi,
        }
    }

    /// Parameter layout shared by draws and names:
    /// β₀..β_{p−1}, the seven covariance parameters, φ per site.
    pub(crate) fn layout_names(p: usize, s: usize) -> Vec<String> {
        let mut names: Vec<String> = (0..p).map(|j| format!("beta{j}")).collect();
        names.extend(
            [
                "sigma2_u", "alpha_u", "sigma2_d", "alpha_d", "sigma2_e", "alpha_e", "sigma2_0",
            ]
            .iter()
            .map(|s| s.to_string()),
        );
        names.extend((0..s).map(|i| format!("phi{i}")));
        names
    }
}

/// Per-cell posterior predictive summary and empirical residuals.
///
/// All matrices are S×T. `resid` and `obs_cdf` are NaN at missing cells;
/// predictive means are finite everywhere (missing cells get genuine
/// predictions, which is how imputation is surfaced to callers).
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub mean: DMatrix<f64>,
    pub sd: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    /// y − predictive mean at observed cells, NaN at missing cells.
    pub resid: DMatrix<f64>,
    /// Predictive CDF evaluated at the observation, NaN at missing cells.
    pub obs_cdf: DMatrix<f64>,
    pub missing: DMatrix<bool>,
    /// Central-interval level the bounds were computed at.
    pub level: f64,
}

impl PredictiveSummary {
    /// Extracts the residual matrix with its missing mask.
    pub fn residual_series(&self) -> ResidualSeries {
        ResidualSeries {
            resid: self.resid.clone(),
            missing: self.missing.clone(),
        }
    }
}

/// Empirical residuals e_{s,t} for detector input; NaN where missing.
#[derive(Debug, Clone)]
pub struct ResidualSeries {
    pub resid: DMatrix<f64>,
    pub missing: DMatrix<bool>,
}

impl ResidualSeries {
    pub fn n_sites(&self) -> usize {
        self.resid.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.resid.ncols()
    }

    /// All non-missing residuals.
    pub fn observed(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for j in 0..self.n_times() {
            for i in 0..self.n_sites() {
                if !self.missing[(i, j)] {
                    out.push(self.resid[(i, j)]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_obs() -> ObservationSet {
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = vec![DMatrix::from_element(2, 1, 1.0); 3];
        ObservationSet::from_complete(
            y,
            x,
            vec!["a".into(), "b".into()],
            vec![0, 1, 2],
        )
        .unwrap()
    }

    #[test]
    fn observation_set_validates_shapes() {
        let obs = tiny_obs();
        assert_eq!(obs.n_sites(), 2);
        assert_eq!(obs.n_times(), 3);
        assert_eq!(obs.n_covariates(), 1);
        assert_eq!(obs.n_missing(), 0);

        // Intercept column must be all ones.
        let y = DMatrix::zeros(1, 1);
        let x = vec![DMatrix::from_element(1, 1, 2.0)];
        let err = ObservationSet::from_complete(y, x, vec!["a".into()], vec![0]);
        assert!(matches!(err, Err(ModelError::InvalidObservations(_))));

        // Time must strictly increase.
        let y = DMatrix::zeros(1, 2);
        let x = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let err = ObservationSet::from_complete(y, x, vec!["a".into()], vec![1, 1]);
        assert!(matches!(err, Err(ModelError::InvalidObservations(_))));
    }

    #[test]
    fn missing_cells_are_nan_and_counted() {
        let y = DMatrix::from_row_slice(1, 3, &[1.0, 99.0, 3.0]);
        let mut mask = DMatrix::from_element(1, 3, false);
        mask[(0, 1)] = true;
        let x = vec![DMatrix::from_element(1, 1, 1.0); 3];
        let obs = ObservationSet::new(y, mask, x, vec!["a".into()], vec![0, 1, 2]).unwrap();
        assert!(obs.y()[(0, 1)].is_nan());
        assert_eq!(obs.n_missing(), 1);
        assert_eq!(obs.observed_values(), vec![1.0, 3.0]);

        let more = obs.with_cells_missing(&[(0, 0)]);
        assert_eq!(more.n_missing(), 2);
    }

    #[test]
    fn slice_times_keeps_alignment() {
        let obs = tiny_obs();
        let cut = obs.slice_times(1, 3);
        assert_eq!(cut.n_times(), 2);
        assert_eq!(cut.time_index(), &[1, 2]);
        assert_eq!(cut.y()[(0, 0)], 2.0);
    }

    #[test]
    fn prior_log_densities() {
        use approx::assert_abs_diff_eq;
        let u = ParamPrior::Uniform { lo: 0.0, hi: 2.0 };
        assert_abs_diff_eq!(u.log_density(1.0), -(2.0f64).ln());
        assert_eq!(u.log_density(3.0), f64::NEG_INFINITY);

        let n = ParamPrior::Normal { mean: 1.0, sd: 2.0 };
        assert_abs_diff_eq!(
            n.log_density(1.0),
            -(2.0f64).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );

        // Gamma(2, 3) at x = 1: log(9) + ln x·(2−1) − 3 = ln 9 − 3.
        let g = ParamPrior::Gamma {
            shape: 2.0,
            rate: 3.0,
        };
        assert_abs_diff_eq!(g.log_density(1.0), (9.0f64).ln() - 3.0, epsilon = 1e-12);
        assert_eq!(g.log_density(-1.0), f64::NEG_INFINITY);

        // AtanhNormal integrates the change of variables: at x = 0,
        // atanh 0 = 0 and the Jacobian term vanishes.
        let a = ParamPrior::AtanhNormal { mean: 0.0, sd: 1.0 };
        assert_abs_diff_eq!(
            a.log_density(0.0),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-12
        );
        assert_eq!(a.log_density(1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn prior_spec_validation() {
        let obs = tiny_obs();
        let net = crate::network::StreamNetwork::generate_random(4, 2, 1).unwrap();
        let spec = PriorSpec::default_for(&obs, &net, CovComponents::default());
        assert!(spec.validate(1, 2).is_ok());
        // Tail-up off by default: sill fixed at zero.
        assert!(spec.sigma2_u.is_fixed());
        assert!(!spec.sigma2_d.is_fixed());

        let mut bad = spec.clone();
        bad.beta = vec![ParamPrior::Uniform { lo: 0.0, hi: 1.0 }];
        assert!(bad.validate(1, 2).is_err());
    }

    #[test]
    fn mcmc_config_validation_and_serde() {
        let cfg = McmcConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.kept_per_chain(), 1000);

        let bad = McmcConfig {
            warmup: 2000,
            ..McmcConfig::default()
        };
        assert!(bad.validate().is_err());

        // Partial JSON fills in defaults.
        let parsed: McmcConfig =
            serde_json::from_str(r#"{"iters": 800, "warmup": 300, "seed": 9}"#).unwrap();
        assert_eq!(parsed.chains, 2);
        assert_eq!(parsed.iters, 800);
        assert_eq!(parsed.seed, 9);
    }

    #[test]
    fn param_prior_serde_round_trip() {
        let priors = vec![
            ParamPrior::Fixed { value: 0.0 },
            ParamPrior::Uniform { lo: -1.0, hi: 1.0 },
            ParamPrior::Normal { mean: 0.0, sd: 10.0 },
            ParamPrior::Gamma {
                shape: 2.0,
                rate: 0.5,
            },
            ParamPrior::AtanhNormal { mean: 1.0, sd: 0.3 },
        ];
        let json = serde_json::to_string(&priors).unwrap();
        let back: Vec<ParamPrior> = serde_json::from_str(&json).unwrap();
        assert_eq!(priors, back);
    }
}
