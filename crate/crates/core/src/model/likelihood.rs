//! Exact log-likelihood of the VAR(1) spatial model.
//!
//! The joint density factorizes over time: the first tick is marginal
//! Gaussian around X₁β, and every later tick is Gaussian around
//! X_tβ + Φ(y_{t−1} − X_{t−1}β), all sharing the spatial covariance
//! Σ + σ₀²I.

use nalgebra::{DMatrix, DVector};

use crate::covariance::{total_covariance, CovarianceError};
use crate::network::StreamNetwork;

use super::{ModelError, ModelParams, ObservationSet};

/// Precision and log-determinant of one spatial covariance matrix, cached so
/// repeated likelihood evaluations share the factorization.
pub(crate) struct SpatialPrecision {
    pub q: DMatrix<f64>,
    pub logdet: f64,
}

impl SpatialPrecision {
    pub fn build(net: &StreamNetwork, theta: &ModelParams) -> Result<Self, ModelError> {
        let v = total_covariance(net, &theta.spatial)?;
        let chol = v
            .clone()
            .cholesky()
            .ok_or(CovarianceError::NotPositiveDefinite)?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let q = chol.inverse();
        Ok(Self { q, logdet })
    }
}

/// Residuals of the one-step conditional means: column t holds
/// y_t − X_tβ − Φ(y_{t−1} − X_{t−1}β), with the marginal mean at t = 0.
pub(crate) fn conditional_residuals(
    y: &DMatrix<f64>,
    x: &[DMatrix<f64>],
    theta: &ModelParams,
) -> DMatrix<f64> {
    let (s, t_len) = y.shape();
    let mut resid = DMatrix::zeros(s, t_len);
    let mut prev_centered: DVector<f64> = DVector::zeros(s);
    for t in 0..t_len {
        let xb = &x[t] * &theta.beta;
        for i in 0..s {
            let mut m = xb[i];
            if t > 0 {
                m += theta.phi[i] * prev_centered[i];
            }
            resid[(i, t)] = y[(i, t)] - m;
        }
        for i in 0..s {
            prev_centered[i] = y[(i, t)] - xb[i];
        }
    }
    resid
}

/// Log-likelihood given a complete response matrix and a prebuilt precision.
pub(crate) fn log_likelihood_complete(
    y: &DMatrix<f64>,
    x: &[DMatrix<f64>],
    theta: &ModelParams,
    prec: &SpatialPrecision,
) -> f64 {
    let (s, t_len) = y.shape();
    let resid = conditional_residuals(y, x, theta);
    let mut quad = 0.0;
    for t in 0..t_len {
        let e = resid.column(t);
        quad += (e.transpose() * &prec.q * e)[(0, 0)];
    }
    let norm = t_len as f64 * (s as f64 * (2.0 * std::f64::consts::PI).ln() + prec.logdet);
    -0.5 * (quad + norm)
}

/// Exact log-likelihood of fully observed data under θ.
///
/// Fails with [`ModelError::MissingValues`] when any response is missing
/// (during MCMC missing cells are latent and handled internally).
pub fn log_likelihood(
    obs: &ObservationSet,
    net: &StreamNetwork,
    theta: &ModelParams,
) -> Result<f64, ModelError> {
    obs.check_alignment(net)?;
    theta.validate()?;
    if obs.n_missing() > 0 {
        return Err(ModelError::MissingValues);
    }
    if theta.beta.len() != obs.n_covariates() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} coefficients for {} covariates",
            theta.beta.len(),
            obs.n_covariates()
        )));
    }
    if theta.phi.len() != obs.n_sites() {
        return Err(ModelError::DimensionMismatch(format!(
            "{} AR coefficients for {} sites",
            theta.phi.len(),
            obs.n_sites()
        )));
    }
    let prec = SpatialPrecision::build(net, theta)?;
    Ok(log_likelihood_complete(obs.y(), &obs.x, theta, &prec))
}
