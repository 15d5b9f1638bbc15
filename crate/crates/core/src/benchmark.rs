//! Replicated synthetic benchmark: simulate labeled data, fit the model,
//! run every selected detector, and aggregate median performance per
//! anomaly type.
//!
//! PPD and the mixtures contribute one- and two-iteration variants; ARIMA
//! and the HMM are single-pass, giving up to six method rows. Replicates
//! are independent and run in a worker pool; replicate `r` derives its data
//! and sampler seeds by offsetting the configured seeds with `r`, so any
//! replicate can be reproduced in isolation.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::{
    detect_arima, detect_hmm, detect_mixture, detect_ppd, AnomalyLabels, DetectorError,
    DetectorMethod,
};
use crate::evaluate::{confusion, ConfusionMetrics, EvalError};
use crate::io::IoError;
use crate::model::{
    posterior_predictive, sample_posterior, CovComponents, McmcConfig, ModelError, PriorSpec,
};
use crate::simulate::{simulate_dataset, AnomalyType, SimConfig, SimError};

/// Errors raised while configuring or running the benchmark study.
#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("invalid benchmark configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

/// Keeps the refit pass of a replicate out of the seed range used by other
/// replicates' first fits.
pub const REFIT_SEED_OFFSET: u64 = 1 << 32;

/// Full study configuration. `Default` is the reduced desk-scale study:
/// the generator's benchmark defaults, 20 replicates, level 0.95, all four
/// methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub sim: SimConfig,
    pub replicates: usize,
    pub mcmc: McmcConfig,
    /// Central-interval level for PPD and ARIMA flagging.
    pub level: f64,
    /// Mixture component count K.
    pub mixture_components: usize,
    /// Hidden-state count L.
    pub hmm_states: usize,
    pub arima_max_p: usize,
    pub arima_max_q: usize,
    pub arima_max_d: usize,
    /// Methods to run, in output order; PPD and mixture expand to their
    /// one- and two-iteration variants.
    pub methods: Vec<DetectorMethod>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sim: SimConfig::default(),
            replicates: 20,
            mcmc: McmcConfig::default(),
            level: 0.95,
            mixture_components: 3,
            hmm_states: 2,
            arima_max_p: 3,
            arima_max_q: 3,
            arima_max_d: 1,
            methods: vec![
                DetectorMethod::Arima,
                DetectorMethod::Ppd,
                DetectorMethod::Mixture,
                DetectorMethod::Hmm,
            ],
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), BenchmarkError> {
        self.sim.validate()?;
        self.mcmc.validate()?;
        if self.replicates == 0 {
            return Err(BenchmarkError::InvalidConfig(
                "need at least one replicate".into(),
            ));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(BenchmarkError::InvalidConfig(format!(
                "interval level must lie in (0,1), got {}",
                self.level
            )));
        }
        if self.mixture_components < 2 {
            return Err(BenchmarkError::InvalidConfig(
                "mixture needs at least two components".into(),
            ));
        }
        if self.hmm_states < 2 {
            return Err(BenchmarkError::InvalidConfig(
                "HMM needs at least two states".into(),
            ));
        }
        if self.methods.is_empty() {
            return Err(BenchmarkError::InvalidConfig(
                "select at least one method".into(),
            ));
        }
        for (k, m) in self.methods.iter().enumerate() {
            if self.methods[..k].contains(m) {
                return Err(BenchmarkError::InvalidConfig(format!(
                    "method `{m}` listed twice"
                )));
            }
        }
        Ok(())
    }

    /// Expands the method list into concrete run variants.
    pub fn variants(&self) -> Vec<MethodVariant> {
        let mut out = Vec::new();
        for &method in &self.methods {
            match method {
                DetectorMethod::Ppd | DetectorMethod::Mixture => {
                    out.push(MethodVariant {
                        method,
                        iteration: 1,
                    });
                    out.push(MethodVariant {
                        method,
                        iteration: 2,
                    });
                }
                DetectorMethod::Arima | DetectorMethod::Hmm => out.push(MethodVariant {
                    method,
                    iteration: 1,
                }),
            }
        }
        out
    }
}

/// One concrete detector run: the method plus its iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MethodVariant {
    pub method: DetectorMethod,
    pub iteration: u8,
}

impl MethodVariant {
    /// Row label, e.g. `ppd_iter2`; single-pass methods keep their bare
    /// name.
    pub fn label(&self) -> String {
        match self.method {
            DetectorMethod::Ppd | DetectorMethod::Mixture => {
                format!("{}_iter{}", self.method, self.iteration)
            }
            DetectorMethod::Arima | DetectorMethod::Hmm => self.method.to_string(),
        }
    }
}

/// Everything one replicate produced: its label grids per variant and the
/// generator's ground truth.
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub labels: Vec<(MethodVariant, AnomalyLabels)>,
    pub truth: DMatrix<Option<AnomalyType>>,
}

/// Simulates replicate `replicate`, fits the model once, and runs every
/// selected variant on the shared fit.
pub fn run_replicate(
    cfg: &BenchmarkConfig,
    replicate: usize,
) -> Result<ReplicateOutcome, BenchmarkError> {
    let mut sim = cfg.sim.clone();
    sim.seed = cfg.sim.seed.wrapping_add(replicate as u64);
    let data = simulate_dataset(&sim)?;
    let obs = &data.observed;
    let net = &data.network;
    let variants = cfg.variants();

    // ARIMA is the only model-free method; fit the spatio-temporal model
    // once and share it across the model-based detectors.
    let needs_model = variants
        .iter()
        .any(|v| v.method != DetectorMethod::Arima);
    let model = if needs_model {
        let priors = PriorSpec::default_for(obs, net, CovComponents::default());
        let mut mcmc = cfg.mcmc.clone();
        mcmc.seed = cfg.mcmc.seed.wrapping_add(replicate as u64);
        let samples = sample_posterior(obs, net, &priors, &mcmc)?;
        let summary = posterior_predictive(&samples, obs, net, cfg.level)?;
        Some((priors, mcmc, summary))
    } else {
        None
    };

    let mut labels = Vec::with_capacity(variants.len());
    for variant in variants {
        let out = match variant.method {
            DetectorMethod::Arima => detect_arima(
                obs,
                cfg.level,
                cfg.arima_max_p,
                cfg.arima_max_q,
                cfg.arima_max_d,
            )?,
            DetectorMethod::Ppd => {
                let (priors, mcmc, summary) = model.as_ref().unwrap();
                let refit = |cells: &[(usize, usize)]| {
                    let masked = obs.with_cells_missing(cells);
                    let mut refit_cfg = mcmc.clone();
                    refit_cfg.seed = mcmc.seed.wrapping_add(REFIT_SEED_OFFSET);
                    let samples = sample_posterior(&masked, net, priors, &refit_cfg)?;
                    posterior_predictive(&samples, &masked, net, cfg.level)
                };
                detect_ppd(summary, cfg.level, variant.iteration, refit)?
            }
            DetectorMethod::Mixture => {
                let (_, _, summary) = model.as_ref().unwrap();
                detect_mixture(
                    &summary.residual_series(),
                    cfg.mixture_components,
                    variant.iteration,
                )?
                .1
            }
            DetectorMethod::Hmm => {
                let (_, _, summary) = model.as_ref().unwrap();
                detect_hmm(&summary.residual_series(), cfg.hmm_states)?.1
            }
        };
        labels.push((variant, out));
    }
    Ok(ReplicateOutcome {
        replicate,
        labels,
        truth: data.truth,
    })
}

/// One aggregated output row: medians across replicates for one method on
/// one anomaly scope (`all` or a single type).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: String,
    pub anomaly_type: String,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub acc_adj: f64,
    pub mcc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brier: Option<f64>,
}

/// Aggregated study output, one row per (method variant, anomaly scope).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub replicates: usize,
    pub rows: Vec<BenchmarkRow>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(
    cfg: &BenchmarkConfig,
    outcomes: &[ReplicateOutcome],
) -> Result<BenchmarkReport, BenchmarkError> {
    let mut rows = Vec::new();
    for (slot, variant) in cfg.variants().into_iter().enumerate() {
        let scopes = std::iter::once((None, "all"))
            .chain(AnomalyType::ALL.iter().map(|&ty| (Some(ty), ty.as_str())));
        for (by_type, scope) in scopes {
            let per_rep: Vec<ConfusionMetrics> = outcomes
                .iter()
                .map(|o| {
                    debug_assert_eq!(o.labels[slot].0, variant);
                    confusion(&o.labels[slot].1, &o.truth, by_type)
                })
                .collect::<Result<_, _>>()?;
            let med = |f: fn(&ConfusionMetrics) -> f64| {
                median(&mut per_rep.iter().map(f).collect::<Vec<_>>())
            };
            let briers: Vec<f64> = per_rep.iter().filter_map(|m| m.brier).collect();
            rows.push(BenchmarkRow {
                method: variant.label(),
                anomaly_type: scope.to_string(),
                se: med(|m| m.se),
                sp: med(|m| m.sp),
                acc: med(|m| m.acc),
                acc_adj: med(|m| m.acc_adj),
                mcc: med(|m| m.mcc),
                brier: (briers.len() == per_rep.len()).then(|| median(&mut briers.clone())),
            });
        }
    }
    Ok(BenchmarkReport {
        replicates: cfg.replicates,
        rows,
    })
}

/// Runs the full study: all replicates in a worker pool, then median
/// aggregation per (method, anomaly type).
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport, BenchmarkError> {
    cfg.validate()?;
    let outcomes: Vec<ReplicateOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<_, _>>()?;
    aggregate(cfg, &outcomes)
}

/// Writes the report as CSV with header
/// `method,anomaly_type,se,sp,acc,acc_adj,mcc,brier` (brier empty when a
/// replicate produced no score-based value).
pub fn write_benchmark_csv(path: impl AsRef<Path>, report: &BenchmarkReport) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["method", "anomaly_type", "se", "sp", "acc", "acc_adj", "mcc", "brier"])?;
    for row in &report.rows {
        w.write_record([
            row.method.as_str(),
            row.anomaly_type.as_str(),
            &format!("{}", row.se),
            &format!("{}", row.sp),
            &format!("{}", row.acc),
            &format!("{}", row.acc_adj),
            &format!("{}", row.mcc),
            &row.brier.map_or(String::new(), |b| format!("{b}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BenchmarkConfig {
        BenchmarkConfig {
            sim: SimConfig {
                n_segments: 12,
                n_sites: 4,
                t_len: 30,
                seed: 90,
                ..SimConfig::default()
            },
            replicates: 2,
            mcmc: McmcConfig {
                chains: 2,
                iters: 250,
                warmup: 100,
                thin: 1,
                seed: 7,
                proposal_scales: None,
            },
            ..BenchmarkConfig::default()
        }
    }

    #[test]
    fn method_lists_expand_to_iteration_variants() {
        let cfg = BenchmarkConfig::default();
        let labels: Vec<String> = cfg.variants().iter().map(|v| v.label()).collect();
        assert_eq!(
            labels,
            [
                "arima",
                "ppd_iter1",
                "ppd_iter2",
                "mixture_iter1",
                "mixture_iter2",
                "hmm"
            ]
        );

        let cfg = BenchmarkConfig {
            methods: vec![DetectorMethod::Hmm],
            ..BenchmarkConfig::default()
        };
        assert_eq!(cfg.variants().len(), 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = |patch: fn(&mut BenchmarkConfig)| {
            let mut cfg = tiny_config();
            patch(&mut cfg);
            assert!(matches!(
                cfg.validate(),
                Err(BenchmarkError::InvalidConfig(_))
            ));
        };
        bad(|c| c.replicates = 0);
        bad(|c| c.level = 1.0);
        bad(|c| c.mixture_components = 1);
        bad(|c| c.hmm_states = 1);
        bad(|c| c.methods.clear());
        bad(|c| c.methods = vec![DetectorMethod::Hmm, DetectorMethod::Hmm]);
    }

    #[test]
    fn tiny_study_produces_a_full_deterministic_report() {
        let cfg = tiny_config();
        let report = run_benchmark(&cfg).unwrap();
        // 6 variants × (all + 4 types).
        assert_eq!(report.rows.len(), 30);
        assert_eq!(report.replicates, 2);
        for row in &report.rows {
            for v in [row.se, row.sp, row.acc, row.acc_adj] {
                assert!((0.0..=1.0).contains(&v), "{}: {v}", row.method);
            }
            assert!((-1.0..=1.0).contains(&row.mcc));
            if let Some(b) = row.brier {
                assert!((0.0..=1.0).contains(&b));
            }
        }
        let again = run_benchmark(&cfg).unwrap();
        assert_eq!(again, report);
    }

    #[test]
    fn report_round_trips_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let report = BenchmarkReport {
            replicates: 3,
            rows: vec![BenchmarkRow {
                method: "hmm".into(),
                anomaly_type: "all".into(),
                se: 0.5,
                sp: 0.25,
                acc: 0.75,
                acc_adj: 0.375,
                mcc: 0.125,
                brier: Some(0.0625),
            }],
        };
        write_benchmark_csv(&path, &report).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "method,anomaly_type,se,sp,acc,acc_adj,mcc,brier\nhmm,all,0.5,0.25,0.75,0.375,0.125,0.0625\n"
        );
    }
}
