//! Posterior predictive summaries: per-cell one-step-ahead predictive draws
//! marginalized over the posterior, central intervals, empirical residuals,
//! and the predictive CDF evaluated at each observation.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ModelError, ObservationSet, PosteriorSamples, PredictiveSummary};
use crate::covariance::total_covariance;
use crate::network::StreamNetwork;
use crate::stats;

/// Stream id for the predictive RNG, distinct from the sampler's chains.
const PREDICTIVE_STREAM: u64 = u64::MAX;

/// Summarizes the posterior predictive distribution cell by cell.
///
/// For every retained draw θ^(m), each cell's predictive value is simulated
/// from the one-step conditional Gaussian given the previous tick (with that
/// draw's imputations filling missing lags). Draw-wise values are then
/// reduced to mean, sd, and the central `level` interval; residuals are
/// observation − predictive mean. Deterministic given the samples.
pub fn posterior_predictive(
    samples: &PosteriorSamples,
    obs: &ObservationSet,
    net: &StreamNetwork,
    level: f64,
) -> Result<PredictiveSummary, ModelError> {
    obs.check_alignment(net)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(ModelError::InvalidConfig(format!(
            "interval level must be inside (0, 1), got {level}"
        )));
    }
    let m_draws = samples.n_draws();
    if m_draws == 0 {
        return Err(ModelError::InvalidConfig(
            "posterior sample set is empty".into(),
        ));
    }
    let s = obs.n_sites();
    let t_len = obs.n_times();
    let mut rng = ChaCha8Rng::seed_from_u64(samples.seed());
    rng.set_stream(PREDICTIVE_STREAM);

    // cell (s,t) ↦ its M predictive draws; cells indexed t*s + i.
    let mut cell_draws: Vec<Vec<f64>> = vec![Vec::with_capacity(m_draws); s * t_len];

    for m in 0..m_draws {
        let theta = samples.params_at(m);
        let v = total_covariance(net, &theta.spatial)?;
        let chol = v
            .cholesky()
            .ok_or(crate::covariance::CovarianceError::NotPositiveDefinite)?;

        // Complete the response with this draw's imputations.
        let mut y = obs.y().clone();
        for (k, &(si, ti)) in samples.missing_cells().iter().enumerate() {
            y[(si, ti)] = samples.imputed_y_draws()[(m, k)];
        }

        let mut prev_centered = DVector::<f64>::zeros(s);
        for t in 0..t_len {
            let xb = obs.x(t) * &theta.beta;
            let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = chol.l() * z;
            for i in 0..s {
                let ar = if t > 0 {
                    theta.phi[i] * prev_centered[i]
                } else {
                    0.0
                };
                cell_draws[t * s + i].push(xb[i] + ar + noise[i]);
            }
            for i in 0..s {
                prev_centered[i] = y[(i, t)] - xb[i];
            }
        }
    }

    let mut mean = DMatrix::zeros(s, t_len);
    let mut sd = DMatrix::zeros(s, t_len);
    let mut lower = DMatrix::zeros(s, t_len);
    let mut upper = DMatrix::zeros(s, t_len);
    let mut resid = DMatrix::from_element(s, t_len, f64::NAN);
    let mut obs_cdf = DMatrix::from_element(s, t_len, f64::NAN);
    let p_lo = (1.0 - level) / 2.0;
    let p_hi = (1.0 + level) / 2.0;

    for t in 0..t_len {
        for i in 0..s {
            let draws = &mut cell_draws[t * s + i];
            draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mu = stats::mean(draws);
            mean[(i, t)] = mu;
            sd[(i, t)] = stats::std_dev(draws);
            lower[(i, t)] = stats::quantile_sorted(draws, p_lo);
            upper[(i, t)] = stats::quantile_sorted(draws, p_hi);
            if !obs.is_missing(i, t) {
                let y_obs = obs.y()[(i, t)];
                resid[(i, t)] = y_obs - mu;
                obs_cdf[(i, t)] = stats::ecdf_sorted(draws, y_obs);
            }
        }
    }

    Ok(PredictiveSummary {
        mean,
        sd,
        lower,
        upper,
        resid,
        obs_cdf,
        missing: obs.missing().clone(),
        level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::SpatialCovParams;
    use crate::model::{CovComponents, McmcConfig, ModelParams, PriorSpec};
    use approx::assert_abs_diff_eq;
    use std::collections::BTreeMap;

    fn sim_obs(
        net: &StreamNetwork,
        theta: &ModelParams,
        t_len: usize,
        seed: u64,
    ) -> ObservationSet {
        let s = net.n_sites();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = total_covariance(net, &theta.spatial).unwrap();
        let chol = v.cholesky().unwrap();
        let x: Vec<DMatrix<f64>> = (0..t_len)
            .map(|_| {
                DMatrix::from_fn(s, theta.beta.len(), |_, j| {
                    if j == 0 {
                        1.0
                    } else {
                        rng.sample::<f64, _>(StandardNormal)
                    }
                })
            })
            .collect();
        let mut y = DMatrix::zeros(s, t_len);
        let mut prev = DVector::<f64>::zeros(s);
        for t in 0..t_len {
            let z = DVector::from_fn(s, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = chol.l() * z;
            let xb = &x[t] * &theta.beta;
            for i in 0..s {
                let ar = if t > 0 { theta.phi[i] * prev[i] } else { 0.0 };
                y[(i, t)] = xb[i] + ar + noise[i];
            }
            for i in 0..s {
                prev[i] = y[(i, t)] - xb[i];
            }
        }
        let sites = net.sites().iter().map(|x| x.site_id.clone()).collect();
        ObservationSet::from_complete(y, x, sites, (0..t_len as i64).collect()).unwrap()
    }

    fn fitted(
        net: &StreamNetwork,
        obs: &ObservationSet,
        seed: u64,
    ) -> PosteriorSamples {
        let priors = PriorSpec::default_for(obs, net, CovComponents::default());
        let cfg = McmcConfig {
            chains: 1,
            iters: 500,
            warmup: 250,
            seed,
            ..Default::default()
        };
        crate::model::sample_posterior(obs, net, &priors, &cfg).unwrap()
    }

    #[test]
    fn missing_cells_get_finite_predictions() {
        let net = StreamNetwork::generate_random(8, 3, 20).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![1.0],
            spatial: SpatialCovParams::taildown_only(2.0, 5.0, 0.2),
            phi: nalgebra::dvector![0.5, 0.5, 0.5],
        };
        let obs = sim_obs(&net, &truth, 40, 21).with_cells_missing(&[(0, 3), (2, 17)]);
        let samples = fitted(&net, &obs, 1);
        let summary = posterior_predictive(&samples, &obs, &net, 0.95).unwrap();
        assert!(summary.mean.iter().all(|v| v.is_finite()));
        assert!(summary.mean[(0, 3)].is_finite());
        // Residual and CDF stay undefined where nothing was observed.
        assert!(summary.resid[(0, 3)].is_nan());
        assert!(summary.obs_cdf[(0, 3)].is_nan());
        assert!(summary.resid[(0, 4)].is_finite());
    }

    #[test]
    fn single_draw_interval_collapses_to_conditional_mean() {
        // Hand-built one-draw posterior with a near-zero-noise θ.
        let net = StreamNetwork::generate_random(4, 2, 22).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![2.0],
            spatial: SpatialCovParams::taildown_only(1.0, 5.0, 0.1),
            phi: nalgebra::dvector![0.0, 0.0],
        };
        let obs = sim_obs(&net, &truth, 5, 23);
        let p = 1;
        let s = 2;
        let row = vec![
            2.0, // beta0
            0.0, 1.0, // tail-up off
            1e-12, 5.0, // tail-down sill ~ 0
            0.0, 1.0, // euclidean off
            1e-12, // nugget ~ 0
            0.0, 0.0, // phi
        ];
        let draws = DMatrix::from_fn(1, row.len(), |_, c| row[c]);
        let samples = PosteriorSamples::new(
            draws,
            PosteriorSamples::layout_names(p, s),
            vec![0],
            BTreeMap::new(),
            DMatrix::zeros(1, 0),
            vec![],
            p,
            s,
            7,
        );
        let summary = posterior_predictive(&samples, &obs, &net, 0.95).unwrap();
        for t in 0..5 {
            for i in 0..2 {
                // One draw: the interval is that single simulated value, and
                // near-zero noise pins it to the conditional mean X·β = 2.
                assert_abs_diff_eq!(summary.lower[(i, t)], summary.upper[(i, t)]);
                assert_abs_diff_eq!(summary.lower[(i, t)], summary.mean[(i, t)]);
                assert_abs_diff_eq!(summary.mean[(i, t)], 2.0, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn intervals_widen_with_level_and_bound_the_mean() {
        let net = StreamNetwork::generate_random(8, 3, 24).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![0.0],
            spatial: SpatialCovParams::taildown_only(2.0, 5.0, 0.3),
            phi: nalgebra::dvector![0.4, 0.4, 0.4],
        };
        let obs = sim_obs(&net, &truth, 30, 25);
        let samples = fitted(&net, &obs, 2);
        let narrow = posterior_predictive(&samples, &obs, &net, 0.5).unwrap();
        let mid = posterior_predictive(&samples, &obs, &net, 0.8).unwrap();
        let wide = posterior_predictive(&samples, &obs, &net, 0.95).unwrap();
        for t in 0..obs.n_times() {
            for i in 0..obs.n_sites() {
                let w0 = narrow.upper[(i, t)] - narrow.lower[(i, t)];
                let w1 = mid.upper[(i, t)] - mid.lower[(i, t)];
                let w2 = wide.upper[(i, t)] - wide.lower[(i, t)];
                assert!(w0 <= w1 + 1e-12 && w1 <= w2 + 1e-12);
                assert!(wide.lower[(i, t)] <= wide.mean[(i, t)] + 1e-9);
                assert!(wide.mean[(i, t)] <= wide.upper[(i, t)] + 1e-9);
            }
        }
    }

    #[test]
    fn coverage_and_score_consistency_on_clean_data() {
        let net = StreamNetwork::generate_random(10, 4, 26).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![1.0, 0.5],
            spatial: SpatialCovParams::taildown_only(2.0, 6.0, 0.2),
            phi: nalgebra::dvector![0.6, 0.6, 0.6, 0.6],
        };
        let obs = sim_obs(&net, &truth, 60, 27);
        let samples = fitted(&net, &obs, 3);
        let level = 0.95;
        let summary = posterior_predictive(&samples, &obs, &net, level).unwrap();
        let mut inside = 0;
        let mut total = 0;
        for t in 0..obs.n_times() {
            for i in 0..obs.n_sites() {
                let y = obs.y()[(i, t)];
                let within = y >= summary.lower[(i, t)] && y <= summary.upper[(i, t)];
                inside += usize::from(within);
                total += 1;
                // Interval flags and CDF scores must agree.
                let score = (2.0 * summary.obs_cdf[(i, t)] - 1.0).abs();
                let outside = y < summary.lower[(i, t)] || y > summary.upper[(i, t)];
                assert_eq!(score > level + 1e-9, outside, "cell ({i},{t})");
            }
        }
        let coverage = inside as f64 / total as f64;
        assert!(
            (0.90..=0.99).contains(&coverage),
            "coverage {coverage} out of band"
        );
        // Residual mean near zero on clean data.
        let resids: Vec<f64> = summary.resid.iter().cloned().collect();
        let se = crate::stats::std_dev(&resids) / (resids.len() as f64).sqrt();
        assert!(crate::stats::mean(&resids).abs() < 3.0 * se + 0.05);
    }

    #[test]
    fn deterministic_given_samples() {
        let net = StreamNetwork::generate_random(6, 2, 28).unwrap();
        let truth = ModelParams {
            beta: nalgebra::dvector![0.5],
            spatial: SpatialCovParams::taildown_only(1.0, 4.0, 0.2),
            phi: nalgebra::dvector![0.3, 0.3],
        };
        let obs = sim_obs(&net, &truth, 25, 29);
        let samples = fitted(&net, &obs, 4);
        let a = posterior_predictive(&samples, &obs, &net, 0.9).unwrap();
        let b = posterior_predictive(&samples, &obs, &net, 0.9).unwrap();
        assert_eq!(a.mean, b.mean);
        assert_eq!(a.lower, b.lower);
        assert_eq!(a.obs_cdf, b.obs_cdf);
    }
}
