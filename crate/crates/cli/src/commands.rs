//! Subcommand implementations: load inputs, run the library pipeline, and
//! write outputs plus a resolved-config JSON so every run can be reproduced
//! from its artifacts alone.
//!
//! Directory-producing commands write `resolved_config.json` inside the
//! output directory; single-file commands write `<out>.config.json` next to
//! the file. JSON numbers and CSV floats use the shortest round-trip
//! representation, so repeated runs are byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;

use stranom::benchmark::{run_benchmark, write_benchmark_csv, REFIT_SEED_OFFSET};
use stranom::detectors::{detect_arima, detect_hmm, detect_mixture, detect_ppd};
use stranom::evaluate::{confusion, ConfusionMetrics};
use stranom::impale::{cluster_sites, detect_events_mhmm, impute_multivariate};
use stranom::io;
use stranom::model::{posterior_predictive, sample_posterior, CovComponents};
use stranom::recursive::fit_recursive;
use stranom::simulate::simulate_dataset;
use stranom::{
    AnomalyType, BenchmarkConfig, DetectorMethod, McmcConfig, PriorSpec, RecursiveConfig,
    SimConfig,
};

use crate::errors::{print_line, CliError};
use crate::{
    BenchmarkArgs, ClusterArgs, DetectArgs, EvaluateArgs, EventsArgs, FitArgs, RecursiveArgs,
    SimulateArgs,
};

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Creates the parent directory of a single-file output path.
fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

/// Loads a JSON config when a path was given, else builds the default.
fn json_or<T: DeserializeOwned>(
    path: Option<&PathBuf>,
    default: impl FnOnce() -> T,
) -> Result<T, CliError> {
    match path {
        Some(p) => Ok(io::read_json(p)?),
        None => Ok(default()),
    }
}

/// Interval levels come from a flag, so a bad value is a usage error.
fn check_level(level: f64) -> Result<(), CliError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "--level must lie strictly between 0 and 1, got {level}"
        )))
    }
}

/// `<out>.config.json`, next to a single-file output.
fn config_sidecar(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".config.json");
    PathBuf::from(name)
}

pub fn simulate(args: SimulateArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: SimConfig = json_or(args.config.as_ref(), SimConfig::default)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = simulate_dataset(&cfg)?;
    let obs = &data.observed;
    ensure_dir(&args.out)?;
    io::write_network(
        &data.network,
        args.out.join("segments.csv"),
        args.out.join("sites.csv"),
    )?;
    let covariate_names: Vec<String> = (1..obs.n_covariates()).map(|c| format!("x{c}")).collect();
    io::write_observations(args.out.join("observations.csv"), obs, &covariate_names)?;
    io::write_truth(
        args.out.join("truth.csv"),
        &data.truth,
        obs.site_order(),
        obs.time_index(),
    )?;
    io::write_json(args.out.join("resolved_config.json"), &cfg)?;
    let anomalous = data.truth.iter().filter(|c| c.is_some()).count();
    print_line(&format!(
        "simulate: {} sites x {} ticks, {} anomalous cells -> {}",
        obs.n_sites(),
        obs.n_times(),
        anomalous,
        args.out.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct ParamSummary {
    mean: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct FitSummary {
    level: f64,
    n_draws: usize,
    params: BTreeMap<String, ParamSummary>,
    acceptance_rates: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct FitConfig<'a> {
    mcmc: &'a McmcConfig,
    priors: &'a PriorSpec,
    level: f64,
}

pub fn fit(args: FitArgs, seed: Option<u64>) -> Result<(), CliError> {
    check_level(args.level)?;
    let net = io::read_network(&args.network, &args.sites)?;
    let (obs, _) = io::read_observations(&args.obs)?;
    let mut mcmc: McmcConfig = json_or(args.mcmc.as_ref(), McmcConfig::default)?;
    if let Some(s) = seed {
        mcmc.seed = s;
    }
    let priors: PriorSpec = match &args.priors {
        Some(p) => io::read_json(p)?,
        None => PriorSpec::default_for(&obs, &net, CovComponents::default()),
    };
    let samples = sample_posterior(&obs, &net, &priors, &mcmc)?;
    ensure_dir(&args.out)?;

    let mut w = csv::Writer::from_path(args.out.join("draws.csv"))?;
    let mut header = vec!["chain".to_string()];
    header.extend(samples.param_names().iter().cloned());
    w.write_record(&header)?;
    let draws = samples.draws();
    for (r, &chain) in samples.chain_ids().iter().enumerate() {
        let mut record = vec![chain.to_string()];
        record.extend(draws.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;

    let mut params = BTreeMap::new();
    for name in samples.param_names() {
        let mean = samples
            .posterior_mean(name)
            .ok_or_else(|| CliError::data(format!("no draws for parameter `{name}`")))?;
        let (lower, upper) = samples
            .central_interval(name, args.level)
            .ok_or_else(|| CliError::data(format!("no draws for parameter `{name}`")))?;
        params.insert(name.clone(), ParamSummary { mean, lower, upper });
    }
    let summary = FitSummary {
        level: args.level,
        n_draws: samples.n_draws(),
        params,
        acceptance_rates: samples.acceptance_rates().clone(),
    };
    io::write_json(args.out.join("summary.json"), &summary)?;
    io::write_json(
        args.out.join("resolved_config.json"),
        &FitConfig {
            mcmc: &mcmc,
            priors: &priors,
            level: args.level,
        },
    )?;
    print_line(&format!(
        "fit: {} draws x {} params -> {}",
        samples.n_draws(),
        samples.param_names().len(),
        args.out.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct ArimaGrid {
    max_p: usize,
    max_q: usize,
    max_d: usize,
}

#[derive(Serialize)]
struct DetectConfig<'a> {
    method: DetectorMethod,
    level: f64,
    iterations: u8,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    l: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    arima: Option<ArimaGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mcmc: Option<&'a McmcConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    priors: Option<&'a PriorSpec>,
}

pub fn detect(args: DetectArgs, seed: Option<u64>) -> Result<(), CliError> {
    let method: DetectorMethod = args.method.parse().map_err(CliError::usage)?;
    check_level(args.level)?;
    if !(args.iterations == 1 || args.iterations == 2) {
        return Err(CliError::usage(format!(
            "--iterations must be 1 or 2, got {}",
            args.iterations
        )));
    }
    if args.iterations == 2 && matches!(method, DetectorMethod::Hmm | DetectorMethod::Arima) {
        return Err(CliError::usage(format!(
            "--iterations 2 applies to ppd and mixture; {} is single-pass",
            method.as_str()
        )));
    }
    // Flag checks come before any file is touched.
    let net_paths = match (method, &args.network, &args.sites) {
        (DetectorMethod::Arima, _, _) => None,
        (_, Some(n), Some(s)) => Some((n, s)),
        _ => {
            return Err(CliError::usage(format!(
                "--network and --sites are required for method `{}`",
                method.as_str()
            )))
        }
    };
    let (obs, _) = io::read_observations(&args.obs)?;

    // The model-based methods share one posterior fit, mirroring the
    // benchmark harness; only its artifacts end up in the resolved config.
    let mut model_cfg: Option<(McmcConfig, PriorSpec)> = None;
    let labels = if method == DetectorMethod::Arima {
        detect_arima(&obs, args.level, args.max_p, args.max_q, args.max_d)?
    } else {
        let (net_path, sites_path) = net_paths.expect("checked above");
        let net = io::read_network(net_path, sites_path)?;
        let mut mcmc: McmcConfig = json_or(args.mcmc.as_ref(), McmcConfig::default)?;
        if let Some(s) = seed {
            mcmc.seed = s;
        }
        let priors: PriorSpec = match &args.priors {
            Some(p) => io::read_json(p)?,
            None => PriorSpec::default_for(&obs, &net, CovComponents::default()),
        };
        let samples = sample_posterior(&obs, &net, &priors, &mcmc)?;
        let summary = posterior_predictive(&samples, &obs, &net, args.level)?;
        let out = match method {
            DetectorMethod::Ppd => {
                let refit = |cells: &[(usize, usize)]| {
                    let masked = obs.with_cells_missing(cells);
                    let mut refit_cfg = mcmc.clone();
                    refit_cfg.seed = mcmc.seed.wrapping_add(REFIT_SEED_OFFSET);
                    let samples = sample_posterior(&masked, &net, &priors, &refit_cfg)?;
                    posterior_predictive(&samples, &masked, &net, args.level)
                };
                detect_ppd(&summary, args.level, args.iterations, refit)?
            }
            DetectorMethod::Mixture => {
                detect_mixture(&summary.residual_series(), args.k, args.iterations)?.1
            }
            DetectorMethod::Hmm => detect_hmm(&summary.residual_series(), args.l)?.1,
            DetectorMethod::Arima => unreachable!("handled above"),
        };
        model_cfg = Some((mcmc, priors));
        out
    };

    ensure_dir(&args.out)?;
    io::write_labels(
        args.out.join("labels.csv"),
        &labels,
        obs.site_order(),
        obs.time_index(),
    )?;
    let cfg = DetectConfig {
        method,
        level: args.level,
        iterations: args.iterations,
        k: (method == DetectorMethod::Mixture).then_some(args.k),
        l: (method == DetectorMethod::Hmm).then_some(args.l),
        arima: (method == DetectorMethod::Arima).then_some(ArimaGrid {
            max_p: args.max_p,
            max_q: args.max_q,
            max_d: args.max_d,
        }),
        mcmc: model_cfg.as_ref().map(|(m, _)| m),
        priors: model_cfg.as_ref().map(|(_, p)| p),
    };
    io::write_json(args.out.join("resolved_config.json"), &cfg)?;
    print_line(&format!(
        "detect: {} flagged {} of {} cells -> {}",
        method.as_str(),
        labels.n_flagged(),
        labels.n_sites() * labels.n_times(),
        args.out.display()
    ));
    Ok(())
}

/// Loads a series in observations format and completes it, either by
/// multivariate imputation (`--impute`) or by rejecting missing cells.
fn complete_series(
    input: &Path,
    impute: bool,
    blend: f64,
) -> Result<(DMatrix<f64>, Vec<String>, Vec<i64>), CliError> {
    if !(0.0..=1.0).contains(&blend) {
        return Err(CliError::usage(format!(
            "--blend must lie in [0, 1], got {blend}"
        )));
    }
    let (obs, _) = io::read_observations(input)?;
    let mut level = obs.y().clone();
    if obs.n_missing() > 0 {
        if !impute {
            return Err(CliError::data(format!(
                "{} has {} missing cells; pass --impute to fill them first",
                input.display(),
                obs.n_missing()
            )));
        }
        level = impute_multivariate(&level, blend)?;
    }
    Ok((
        level,
        obs.site_order().to_vec(),
        obs.time_index().to_vec(),
    ))
}

#[derive(Serialize)]
struct EventsConfig {
    l: usize,
    impute: bool,
    blend: f64,
}

pub fn events(args: EventsArgs, _seed: Option<u64>) -> Result<(), CliError> {
    if args.l < 2 {
        return Err(CliError::usage(format!(
            "--l must be at least 2, got {}",
            args.l
        )));
    }
    let (level, _, time_index) = complete_series(&args.input, args.impute, args.blend)?;
    let labels = detect_events_mhmm(&level, args.l)?;
    ensure_parent(&args.out)?;
    io::write_events(&args.out, &labels, &time_index)?;
    io::write_json(
        config_sidecar(&args.out),
        &EventsConfig {
            l: args.l,
            impute: args.impute,
            blend: args.blend,
        },
    )?;
    print_line(&format!(
        "events: {} of {} ticks in event state -> {}",
        labels.n_events(),
        labels.n_times(),
        args.out.display()
    ));
    Ok(())
}

#[derive(Serialize)]
struct ClusterConfig {
    k: usize,
    impute: bool,
    blend: f64,
}

pub fn cluster(args: ClusterArgs, _seed: Option<u64>) -> Result<(), CliError> {
    if args.k == 0 {
        return Err(CliError::usage("--k must be at least 1"));
    }
    let (level, site_order, _) = complete_series(&args.input, args.impute, args.blend)?;
    let clustering = cluster_sites(&level, args.k)?;
    ensure_parent(&args.out)?;
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["site_id", "cluster"])?;
    for (site, &label) in site_order.iter().zip(&clustering.assignment) {
        w.write_record([site.as_str(), &label.to_string()])?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    io::write_json(
        config_sidecar(&args.out),
        &ClusterConfig {
            k: args.k,
            impute: args.impute,
            blend: args.blend,
        },
    )?;
    print_line(&format!(
        "cluster: {} sites into {} clusters -> {}",
        site_order.len(),
        clustering.k,
        args.out.display()
    ));
    Ok(())
}

/// Reindexes the truth grid onto the prediction grid's site and time axes;
/// the two files must cover exactly the same sites and ticks.
fn align_truth(
    truth: &DMatrix<Option<AnomalyType>>,
    truth_sites: &[String],
    truth_times: &[i64],
    pred_sites: &[String],
    pred_times: &[i64],
) -> Result<DMatrix<Option<AnomalyType>>, CliError> {
    let site_at: BTreeMap<&str, usize> = truth_sites
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let time_at: BTreeMap<i64, usize> = truth_times
        .iter()
        .enumerate()
        .map(|(j, &t)| (t, j))
        .collect();
    let site_rows: Vec<usize> = pred_sites
        .iter()
        .map(|s| {
            site_at.get(s.as_str()).copied().ok_or_else(|| {
                CliError::data(format!("site `{s}` has predictions but no truth"))
            })
        })
        .collect::<Result<_, _>>()?;
    let time_cols: Vec<usize> = pred_times
        .iter()
        .map(|&t| {
            time_at
                .get(&t)
                .copied()
                .ok_or_else(|| CliError::data(format!("time {t} has predictions but no truth")))
        })
        .collect::<Result<_, _>>()?;
    if truth_sites.len() != pred_sites.len() {
        return Err(CliError::data(format!(
            "truth covers {} sites but predictions cover {}",
            truth_sites.len(),
            pred_sites.len()
        )));
    }
    if truth_times.len() != pred_times.len() {
        return Err(CliError::data(format!(
            "truth covers {} ticks but predictions cover {}",
            truth_times.len(),
            pred_times.len()
        )));
    }
    Ok(DMatrix::from_fn(site_rows.len(), time_cols.len(), |i, j| {
        truth[(site_rows[i], time_cols[j])]
    }))
}

fn write_metrics_csv(path: &Path, rows: &[(String, ConfusionMetrics)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "anomaly_type",
        "true_positives",
        "false_positives",
        "true_negatives",
        "false_negatives",
        "se",
        "sp",
        "acc",
        "acc_adj",
        "mcc",
        "brier",
    ])?;
    for (scope, m) in rows {
        w.write_record([
            scope.as_str(),
            &m.true_positives.to_string(),
            &m.false_positives.to_string(),
            &m.true_negatives.to_string(),
            &m.false_negatives.to_string(),
            &format!("{}", m.se),
            &format!("{}", m.sp),
            &format!("{}", m.acc),
            &format!("{}", m.acc_adj),
            &format!("{}", m.mcc),
            &m.brier.map_or(String::new(), |b| format!("{b}")),
        ])?;
    }
    w.flush().map_err(|e| CliError::data(e.to_string()))?;
    Ok(())
}

pub fn evaluate(args: EvaluateArgs, _seed: Option<u64>) -> Result<(), CliError> {
    let (pred, pred_sites, pred_times) = io::read_labels(&args.pred)?;
    let (truth, truth_sites, truth_times) = io::read_truth(&args.truth)?;
    let aligned = align_truth(&truth, &truth_sites, &truth_times, &pred_sites, &pred_times)?;

    let mut rows: Vec<(String, ConfusionMetrics)> =
        vec![("all".to_string(), confusion(&pred, &aligned, None)?)];
    if args.by_type {
        for ty in AnomalyType::ALL {
            rows.push((ty.as_str().to_string(), confusion(&pred, &aligned, Some(ty))?));
        }
    }

    match &args.out {
        None => {
            let map: BTreeMap<&str, &ConfusionMetrics> =
                rows.iter().map(|(k, v)| (k.as_str(), v)).collect();
            print_line(&format!("{}", serde_json::to_string_pretty(&map)?));
        }
        Some(path) => {
            ensure_parent(path)?;
            if path.extension().is_some_and(|e| e == "csv") {
                write_metrics_csv(path, &rows)?;
            } else {
                let map: BTreeMap<&str, &ConfusionMetrics> =
                    rows.iter().map(|(k, v)| (k.as_str(), v)).collect();
                io::write_json(path, &map)?;
            }
            let all = &rows[0].1;
            print_line(&format!(
                "evaluate: {} cells, mcc {} -> {}",
                all.total(),
                all.mcc,
                path.display()
            ));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RecursiveCliConfig<'a> {
    batch_len: usize,
    config: &'a RecursiveConfig,
    priors: &'a PriorSpec,
}

pub fn recursive(args: RecursiveArgs, seed: Option<u64>) -> Result<(), CliError> {
    if args.batch_len == 0 {
        return Err(CliError::usage("--batch-len must be at least 1"));
    }
    let net = io::read_network(&args.network, &args.sites)?;
    let (obs, _) = io::read_observations(&args.obs)?;
    let mut cfg: RecursiveConfig = json_or(args.config.as_ref(), RecursiveConfig::default)?;
    if let Some(s) = seed {
        cfg.mcmc.seed = s;
    }
    let priors: PriorSpec = match &args.priors {
        Some(p) => io::read_json(p)?,
        None => PriorSpec::default_for(&obs, &net, CovComponents::default()),
    };
    let t_len = obs.n_times();
    let mut batches = Vec::new();
    let mut from = 0;
    while from < t_len {
        let to = (from + args.batch_len).min(t_len);
        batches.push(obs.slice_times(from, to));
        from = to;
    }
    let (states, labels) = fit_recursive(&batches, &net, &priors, &cfg)?;
    ensure_dir(&args.out)?;
    io::write_labels(
        args.out.join("labels.csv"),
        &labels,
        obs.site_order(),
        obs.time_index(),
    )?;
    io::write_json(args.out.join("states.json"), &states)?;
    io::write_json(
        args.out.join("resolved_config.json"),
        &RecursiveCliConfig {
            batch_len: args.batch_len,
            config: &cfg,
            priors: &priors,
        },
    )?;
    let skipped = states.iter().filter(|s| s.skipped).count();
    print_line(&format!(
        "recursive: {} batches ({} skipped), {} cells flagged -> {}",
        states.len(),
        skipped,
        labels.n_flagged(),
        args.out.display()
    ));
    Ok(())
}

pub fn benchmark(args: BenchmarkArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg: BenchmarkConfig = json_or(args.config.as_ref(), BenchmarkConfig::default)?;
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(methods) = &args.methods {
        cfg.methods = if methods == "all" {
            vec![
                DetectorMethod::Arima,
                DetectorMethod::Ppd,
                DetectorMethod::Mixture,
                DetectorMethod::Hmm,
            ]
        } else {
            methods
                .split(',')
                .map(|m| m.trim().parse().map_err(CliError::usage))
                .collect::<Result<_, _>>()?
        };
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
        cfg.mcmc.seed = s;
    }
    let report = run_benchmark(&cfg)?;
    ensure_dir(&args.out)?;
    write_benchmark_csv(args.out.join("metrics.csv"), &report)?;
    io::write_json(args.out.join("resolved_config.json"), &cfg)?;
    print_line(&format!(
        "benchmark: {} replicates, {} rows -> {}",
        report.replicates,
        report.rows.len(),
        args.out.display()
    ));
    Ok(())
}
