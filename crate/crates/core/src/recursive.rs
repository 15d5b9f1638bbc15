//! Recursive batch fitting with posterior-to-prior carryover.
//!
//! Ordered batches are fitted one after another; each posterior is moment
//! matched into the parametric prior families and carried into the next
//! batch, unless the batch looks anomalous (flagged fraction above the skip
//! threshold) or its fit fails, in which case the carried prior is left at
//! the last trustworthy posterior.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{detect_ppd, AnomalyLabels, CellFlag, DetectorError, DetectorMethod};
use crate::model::{
    posterior_predictive, sample_posterior, McmcConfig, ModelError, ObservationSet, ParamPrior,
    PosteriorSamples, PriorSpec,
};
use crate::network::StreamNetwork;

#[derive(Debug, Error)]
pub enum RecursiveError {
    #[error("invalid batches: {0}")]
    InvalidBatches(String),
    #[error("invalid recursive config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// Which parameter blocks carry their moment-matched posterior forward.
/// A disabled block keeps the initial prior for every batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarryFlags {
    pub beta: bool,
    pub sigma2_u: bool,
    pub alpha_u: bool,
    pub sigma2_d: bool,
    pub alpha_d: bool,
    pub sigma2_e: bool,
    pub alpha_e: bool,
    pub sigma2_0: bool,
    pub phi: bool,
}

impl Default for CarryFlags {
    fn default() -> Self {
        Self {
            beta: true,
            sigma2_u: true,
            alpha_u: true,
            sigma2_d: true,
            alpha_d: true,
            sigma2_e: true,
            alpha_e: true,
            sigma2_0: true,
            phi: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecursiveConfig {
    pub mcmc: McmcConfig,
    /// Credible level for the one-iteration posterior-predictive pass.
    pub level: f64,
    /// A batch whose flagged fraction exceeds this is skipped: its posterior
    /// is not carried forward. 1 disables skipping entirely.
    pub skip_threshold: f64,
    pub carry: CarryFlags,
}

impl Default for RecursiveConfig {
    fn default() -> Self {
        Self {
            mcmc: McmcConfig::default(),
            level: 0.95,
            skip_threshold: 0.2,
            carry: CarryFlags::default(),
        }
    }
}

impl RecursiveConfig {
    pub fn validate(&self) -> Result<(), RecursiveError> {
        self.mcmc.validate()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(RecursiveError::InvalidConfig(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        if !(self.skip_threshold > 0.0 && self.skip_threshold <= 1.0) {
            return Err(RecursiveError::InvalidConfig(format!(
                "skip_threshold must lie in (0, 1], got {}",
                self.skip_threshold
            )));
        }
        Ok(())
    }
}

/// Outcome of one batch: the prior that will seed the next batch, the
/// batch's flagged fraction, and whether its posterior was withheld.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchState {
    pub index: usize,
    /// Prior carried into the next batch. For a skipped batch this equals
    /// the prior the batch itself was fitted with.
    pub prior: PriorSpec,
    pub anomaly_fraction: f64,
    pub skipped: bool,
    /// Present when the fit itself failed (the batch is then skipped).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_error: Option<String>,
}

/// Fit time-ordered batches sequentially, carrying moment-matched posteriors
/// forward as priors and skipping batches that look anomalous. Returns one
/// state per batch plus the concatenated one-iteration detector labels
/// (cells of a batch whose fit failed are marked missing).
pub fn fit_recursive(
    batches: &[ObservationSet],
    net: &StreamNetwork,
    init_priors: &PriorSpec,
    cfg: &RecursiveConfig,
) -> Result<(Vec<BatchState>, AnomalyLabels), RecursiveError> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(RecursiveError::InvalidBatches("no batches supplied".into()));
    }
    let s = batches[0].n_sites();
    let p = batches[0].n_covariates();
    for (i, b) in batches.iter().enumerate() {
        if b.n_sites() != s || b.n_covariates() != p {
            return Err(RecursiveError::InvalidBatches(format!(
                "batch {i} has shape {}×· with {} covariates; batch 0 has {s} sites and {p}",
                b.n_sites(),
                b.n_covariates()
            )));
        }
        if i > 0 {
            let prev_end = batches[i - 1].time_index()[batches[i - 1].n_times() - 1];
            let start = b.time_index()[0];
            if start != prev_end + 1 {
                return Err(RecursiveError::InvalidBatches(format!(
                    "batch {i} starts at time {start}, expected {}",
                    prev_end + 1
                )));
            }
        }
    }
    init_priors
        .validate(p, s)
        .map_err(RecursiveError::Model)?;

    let total_t: usize = batches.iter().map(|b| b.n_times()).sum();
    let mut flags = DMatrix::from_element(s, total_t, CellFlag::Missing);
    let mut scores = DMatrix::from_element(s, total_t, f64::NAN);
    let mut states: Vec<BatchState> = Vec::with_capacity(batches.len());
    let mut carried = init_priors.clone();

    let mut t_offset = 0;
    for (i, batch) in batches.iter().enumerate() {
        let mut mcmc = cfg.mcmc.clone();
        mcmc.seed = cfg.mcmc.seed.wrapping_add(i as u64);
        let outcome = fit_batch(batch, net, &carried, &mcmc, cfg.level);
        let state = match outcome {
            Ok((samples, labels)) => {
                for t in 0..batch.n_times() {
                    for site in 0..s {
                        flags[(site, t_offset + t)] = labels.flags[(site, t)];
                        scores[(site, t_offset + t)] = labels.scores[(site, t)];
                    }
                }
                let fraction = labels.flag_rate();
                let skipped = fraction > cfg.skip_threshold;
                if !skipped {
                    carried = moment_match(&samples, &carried, init_priors, &cfg.carry);
                }
                BatchState {
                    index: i,
                    prior: carried.clone(),
                    anomaly_fraction: fraction,
                    skipped,
                    fit_error: None,
                }
            }
            Err(e) => BatchState {
                index: i,
                prior: carried.clone(),
                anomaly_fraction: 0.0,
                skipped: true,
                fit_error: Some(e.to_string()),
            },
        };
        states.push(state);
        t_offset += batch.n_times();
    }

    let labels = AnomalyLabels {
        flags,
        scores,
        method: DetectorMethod::Ppd,
        iteration: 1,
        threshold: cfg.level,
    };
    labels.validate()?;
    Ok((states, labels))
}

fn fit_batch(
    batch: &ObservationSet,
    net: &StreamNetwork,
    prior: &PriorSpec,
    mcmc: &McmcConfig,
    level: f64,
) -> Result<(PosteriorSamples, AnomalyLabels), RecursiveError> {
    let samples = sample_posterior(batch, net, prior, mcmc)?;
    let summary = posterior_predictive(&samples, batch, net, level)?;
    // One iteration: the refit callback is never invoked.
    let labels = detect_ppd(&summary, level, 1, |_held_out| {
        Err(ModelError::InvalidConfig(
            "single-pass detection never refits".into(),
        ))
    })?;
    Ok((samples, labels))
}

/// Moment-match posterior draws into the prior families: normal for β,
/// atanh-normal for φ, and gamma (shape/rate from mean and variance) for
/// sills, ranges, and the nugget. Fixed parameters stay fixed, and blocks
/// opted out of carrying revert to the initial prior.
fn moment_match(
    samples: &PosteriorSamples,
    current: &PriorSpec,
    init: &PriorSpec,
    carry: &CarryFlags,
) -> PriorSpec {
    let mut next = current.clone();

    for j in 0..next.beta.len() {
        next.beta[j] = if carry.beta {
            matched_normal(samples, &format!("beta{j}"), &current.beta[j])
        } else {
            init.beta[j]
        };
    }

    let gamma_or_init = |name: &str, carried: bool, cur: &ParamPrior, ini: &ParamPrior| {
        if carried {
            matched_gamma(samples, name, cur)
        } else {
            *ini
        }
    };
    next.sigma2_u = gamma_or_init("sigma2_u", carry.sigma2_u, &current.sigma2_u, &init.sigma2_u);
    next.alpha_u = gamma_or_init("alpha_u", carry.alpha_u, &current.alpha_u, &init.alpha_u);
    next.sigma2_d = gamma_or_init("sigma2_d", carry.sigma2_d, &current.sigma2_d, &init.sigma2_d);
    next.alpha_d = gamma_or_init("alpha_d", carry.alpha_d, &current.alpha_d, &init.alpha_d);
    next.sigma2_e = gamma_or_init("sigma2_e", carry.sigma2_e, &current.sigma2_e, &init.sigma2_e);
    next.alpha_e = gamma_or_init("alpha_e", carry.alpha_e, &current.alpha_e, &init.alpha_e);
    next.sigma2_0 = gamma_or_init("sigma2_0", carry.sigma2_0, &current.sigma2_0, &init.sigma2_0);

    if carry.phi {
        let n_sites = samples.params_at(0).phi.len();
        next.phi = (0..n_sites)
            .map(|site| {
                let cur = *current.phi_prior(site, n_sites).expect("validated prior");
                matched_atanh_normal(samples, &format!("phi{site}"), &cur)
            })
            .collect();
    } else {
        next.phi = init.phi.clone();
    }
    next
}

fn matched_normal(samples: &PosteriorSamples, name: &str, fallback: &ParamPrior) -> ParamPrior {
    if fallback.is_fixed() {
        return *fallback;
    }
    let (mean, var) = draw_moments(samples, name);
    ParamPrior::Normal {
        mean,
        sd: var.sqrt().max(1e-6 * (1.0 + mean.abs())),
    }
}

fn matched_gamma(samples: &PosteriorSamples, name: &str, fallback: &ParamPrior) -> ParamPrior {
    if fallback.is_fixed() {
        return *fallback;
    }
    let (mean, var) = draw_moments(samples, name);
    let mean = mean.max(1e-12);
    let var = var.max(1e-10 * mean * mean);
    ParamPrior::Gamma {
        shape: mean * mean / var,
        rate: mean / var,
    }
}

fn matched_atanh_normal(
    samples: &PosteriorSamples,
    name: &str,
    fallback: &ParamPrior,
) -> ParamPrior {
    if fallback.is_fixed() {
        return *fallback;
    }
    let draws: Vec<f64> = samples
        .param_draws(name)
        .expect("known parameter")
        .iter()
        .map(|&v| v.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh())
        .collect();
    let (mean, var) = mean_var(&draws);
    ParamPrior::AtanhNormal {
        mean,
        sd: var.sqrt().max(1e-6 * (1.0 + mean.abs())),
    }
}

fn draw_moments(samples: &PosteriorSamples, name: &str) -> (f64, f64) {
    let draws = samples.param_draws(name).expect("known parameter");
    mean_var(&draws)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = crate::stats::mean(v);
    (m, crate::stats::variance(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CovComponents;
    use crate::simulate::{simulate_dataset, SimConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn quick_mcmc(seed: u64) -> McmcConfig {
        McmcConfig {
            chains: 2,
            iters: 350,
            warmup: 150,
            thin: 1,
            seed,
            proposal_scales: None,
        }
    }

    fn sim_batches(seed: u64, n_batches: usize, batch_len: usize) -> (Vec<ObservationSet>, ObservationSet, StreamNetwork) {
        let cfg = SimConfig {
            n_segments: 25,
            n_sites: 5,
            t_len: n_batches * batch_len,
            q_ini: 0.0,
            seed,
            ..SimConfig::default()
        };
        let ds = simulate_dataset(&cfg).unwrap();
        let batches: Vec<ObservationSet> = (0..n_batches)
            .map(|b| ds.observed.slice_times(b * batch_len, (b + 1) * batch_len))
            .collect();
        (batches, ds.observed, ds.network)
    }

    fn beta_means(prior: &PriorSpec) -> Vec<f64> {
        prior
            .beta
            .iter()
            .map(|p| match p {
                ParamPrior::Normal { mean, .. } => *mean,
                other => panic!("expected a normal β prior, got {other:?}"),
            })
            .collect()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn clean_batches_approach_the_pooled_estimate() {
        let (batches, pooled_obs, net) = sim_batches(60, 4, 12);
        let init = PriorSpec::default_for(&pooled_obs, &net, CovComponents::default());

        let pooled =
            sample_posterior(&pooled_obs, &net, &init, &quick_mcmc(500)).unwrap();
        let pooled_beta: Vec<f64> = (0..pooled_obs.n_covariates())
            .map(|j| pooled.posterior_mean(&format!("beta{j}")).unwrap())
            .collect();

        let cfg = RecursiveConfig {
            mcmc: quick_mcmc(7),
            ..RecursiveConfig::default()
        };
        let (states, labels) = fit_recursive(&batches, &net, &init, &cfg).unwrap();
        assert_eq!(states.len(), 4);
        assert_eq!(labels.n_times(), 48);
        assert!(states.iter().all(|s| !s.skipped));
        for s in &states {
            s.prior.validate(pooled_obs.n_covariates(), 5).unwrap();
            assert!((0.0..=1.0).contains(&s.anomaly_fraction));
        }

        let init_d = dist(&beta_means(&init), &pooled_beta);
        let dists: Vec<f64> = states
            .iter()
            .map(|s| dist(&beta_means(&s.prior), &pooled_beta))
            .collect();
        assert!(
            dists[0] < init_d,
            "first batch should pull β toward the pooled fit: {dists:?} vs {init_d}"
        );
        assert!(
            dists[3] <= dists[0],
            "β prior means should approach the pooled estimate: {dists:?}"
        );
        assert!(
            dists[3] < 0.2,
            "final β prior means should sit within 0.2 of the pooled fit, got {}",
            dists[3]
        );
    }

    #[test]
    fn corrupted_batch_is_skipped_and_prior_carried() {
        let (mut batches, pooled_obs, net) = sim_batches(61, 4, 12);
        // Replace the third batch by pure wide noise so nearly every cell
        // lands far outside the predictive interval.
        let noisy = {
            let b = &batches[2];
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let y = DMatrix::from_fn(b.n_sites(), b.n_times(), |_, _| {
                26.0 * rng.sample::<f64, _>(StandardNormal)
            });
            let x: Vec<DMatrix<f64>> = (0..b.n_times()).map(|t| b.x(t).clone()).collect();
            ObservationSet::new(
                y,
                DMatrix::from_element(b.n_sites(), b.n_times(), false),
                x,
                b.site_order().to_vec(),
                b.time_index().to_vec(),
            )
            .unwrap()
        };
        batches[2] = noisy;

        let init = PriorSpec::default_for(&pooled_obs, &net, CovComponents::default());
        let cfg = RecursiveConfig {
            mcmc: quick_mcmc(11),
            skip_threshold: 0.3,
            ..RecursiveConfig::default()
        };
        let (states, _) = fit_recursive(&batches, &net, &init, &cfg).unwrap();
        assert!(!states[0].skipped && !states[1].skipped);
        assert!(
            states[2].skipped,
            "corrupted batch flagged {:.2} of cells but was not skipped",
            states[2].anomaly_fraction
        );
        assert!(states[2].anomaly_fraction > 0.3);
        assert_eq!(
            states[2].prior, states[1].prior,
            "a skipped batch must carry the previous prior unchanged"
        );
        assert!(!states[3].skipped);

        // With the threshold at 1 the same data never skips.
        let cfg_never = RecursiveConfig {
            mcmc: quick_mcmc(11),
            skip_threshold: 1.0,
            ..RecursiveConfig::default()
        };
        let (states_never, _) = fit_recursive(&batches, &net, &init, &cfg_never).unwrap();
        assert!(states_never.iter().all(|s| !s.skipped));
        assert_ne!(states_never[2].prior, states_never[1].prior);
    }

    #[test]
    fn carry_opt_out_keeps_the_initial_prior() {
        let (batches, pooled_obs, net) = sim_batches(62, 2, 12);
        let init = PriorSpec::default_for(&pooled_obs, &net, CovComponents::default());
        let cfg = RecursiveConfig {
            mcmc: quick_mcmc(13),
            carry: CarryFlags {
                phi: false,
                sigma2_0: false,
                ..CarryFlags::default()
            },
            ..RecursiveConfig::default()
        };
        let (states, _) = fit_recursive(&batches, &net, &init, &cfg).unwrap();
        for s in &states {
            assert_eq!(s.prior.phi, init.phi, "φ carrying was opted out");
            assert_eq!(s.prior.sigma2_0, init.sigma2_0);
            assert_ne!(s.prior.beta, init.beta, "β still carries");
        }
    }

    #[test]
    fn batch_state_roundtrips_through_json() {
        let (batches, pooled_obs, net) = sim_batches(63, 1, 12);
        let init = PriorSpec::default_for(&pooled_obs, &net, CovComponents::default());
        let cfg = RecursiveConfig {
            mcmc: quick_mcmc(17),
            ..RecursiveConfig::default()
        };
        let (states, _) = fit_recursive(&batches, &net, &init, &cfg).unwrap();
        let json = serde_json::to_string_pretty(&states[0]).unwrap();
        let back: BatchState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, states[0]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let (batches, pooled_obs, net) = sim_batches(64, 2, 12);
        let init = PriorSpec::default_for(&pooled_obs, &net, CovComponents::default());

        let bad_threshold = RecursiveConfig {
            skip_threshold: 0.0,
            ..RecursiveConfig::default()
        };
        assert!(matches!(
            fit_recursive(&batches, &net, &init, &bad_threshold),
            Err(RecursiveError::InvalidConfig(_))
        ));

        assert!(matches!(
            fit_recursive(&[], &net, &init, &RecursiveConfig::default()),
            Err(RecursiveError::InvalidBatches(_))
        ));

        // Swapped batches break time contiguity.
        let swapped = vec![batches[1].clone(), batches[0].clone()];
        assert!(matches!(
            fit_recursive(&swapped, &net, &init, &RecursiveConfig::default()),
            Err(RecursiveError::InvalidBatches(_))
        ));
    }
}
