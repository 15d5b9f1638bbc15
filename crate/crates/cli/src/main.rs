//! `stranom` — end-to-end pipeline for technical-anomaly detection in
//! spatio-temporal sensor data on stream networks: simulate labeled data,
//! fit the spatio-temporal model, detect anomalies, label catchment events,
//! cluster sites, evaluate against truth, fit recursively in batches, and
//! run the replicated benchmark study.
//!
//! Every run is pure given (config, input files, seed): identical
//! invocations produce byte-identical outputs, and each run writes a
//! resolved-config JSON next to its outputs. Failures exit 2 (usage),
//! 3 (data), or 4 (numerical) with a one-line JSON report on stderr.

mod commands;
mod errors;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use errors::{emit_error, CliError, Kind};

#[derive(Parser)]
#[command(name = "stranom", version, about = "Anomaly detection for sensor networks on streams")]
struct Cli {
    /// Seed for every stochastic step; overrides the seed in config files.
    /// Deterministic subcommands accept it without effect.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (network, observations, truth).
    Simulate(SimulateArgs),
    /// Fit the VAR(1) spatial model by MCMC and summarize the posterior.
    Fit(FitArgs),
    /// Flag anomalous cells with one of the four detectors.
    Detect(DetectArgs),
    /// Label each time tick ambient or event from multi-site level data.
    Events(EventsArgs),
    /// Group sites by dynamic-time-warping distance of their series.
    Cluster(ClusterArgs),
    /// Score predicted labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Fit consecutive batches, carrying moment-matched priors forward.
    Recursive(RecursiveArgs),
    /// Run the replicated simulation study and emit the metrics table.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generator config JSON; defaults to the benchmark parameterization.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Segments CSV (`segment_id,downstream_id,length,additive_weight`).
    #[arg(long)]
    network: PathBuf,
    /// Sites CSV (`site_id,segment_id,upstream_offset,x,y`).
    #[arg(long)]
    sites: PathBuf,
    /// Observations CSV (`site_id,time,value,<covariates>`).
    #[arg(long)]
    obs: PathBuf,
    /// Sampler config JSON; defaults to 2 chains of 1500 sweeps.
    #[arg(long)]
    mcmc: Option<PathBuf>,
    /// Prior spec JSON; defaults to data-informed weak priors.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Central-interval level for the posterior summary.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DetectArgs {
    /// Detector: ppd, mixture, hmm, or arima.
    #[arg(long)]
    method: String,
    /// Observations CSV (`site_id,time,value,<covariates>`).
    #[arg(long)]
    obs: PathBuf,
    /// Segments CSV; required for the model-based methods.
    #[arg(long)]
    network: Option<PathBuf>,
    /// Sites CSV; required for the model-based methods.
    #[arg(long)]
    sites: Option<PathBuf>,
    /// Central-interval level for flagging.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Detection passes (1 or 2); 2 refits after removing first-pass flags.
    #[arg(long, default_value_t = 1)]
    iterations: u8,
    /// Mixture component count.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Hidden-state count.
    #[arg(long, default_value_t = 2)]
    l: usize,
    /// ARIMA grid bound on the autoregressive order.
    #[arg(long, default_value_t = 3)]
    max_p: usize,
    /// ARIMA grid bound on the moving-average order.
    #[arg(long, default_value_t = 3)]
    max_q: usize,
    /// ARIMA grid bound on differencing.
    #[arg(long, default_value_t = 1)]
    max_d: usize,
    /// Sampler config JSON for the model-based methods.
    #[arg(long)]
    mcmc: Option<PathBuf>,
    /// Prior spec JSON for the model-based methods.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EventsArgs {
    /// Level series CSV in observations format (`site_id,time,value`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Hidden-state count.
    #[arg(long, default_value_t = 2)]
    l: usize,
    /// Fill missing cells by multivariate imputation before labeling.
    #[arg(long)]
    impute: bool,
    /// Imputation weight on the cross-site estimate versus the temporal
    /// trend.
    #[arg(long, default_value_t = 0.5)]
    blend: f64,
    /// Output events CSV path; the resolved config lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClusterArgs {
    /// Series CSV in observations format (`site_id,time,value`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of clusters to cut the dendrogram at.
    #[arg(long)]
    k: usize,
    /// Fill missing cells by multivariate imputation before clustering.
    #[arg(long)]
    impute: bool,
    /// Imputation weight on the cross-site estimate versus the temporal
    /// trend.
    #[arg(long, default_value_t = 0.5)]
    blend: f64,
    /// Output assignment CSV path; the resolved config lands next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predicted labels CSV (`site_id,time,flag,score,method`).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth CSV (`site_id,time,type`).
    #[arg(long)]
    truth: PathBuf,
    /// Also report metrics per anomaly type.
    #[arg(long)]
    by_type: bool,
    /// Output path (.json or .csv); omitted prints JSON to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RecursiveArgs {
    /// Segments CSV (`segment_id,downstream_id,length,additive_weight`).
    #[arg(long)]
    network: PathBuf,
    /// Sites CSV (`site_id,segment_id,upstream_offset,x,y`).
    #[arg(long)]
    sites: PathBuf,
    /// Observations CSV (`site_id,time,value,<covariates>`).
    #[arg(long)]
    obs: PathBuf,
    /// Ticks per batch; the time axis splits into consecutive chunks (the
    /// last may be shorter).
    #[arg(long)]
    batch_len: usize,
    /// Recursive-fitting config JSON (sampler, level, skip threshold,
    /// carry flags).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prior spec JSON seeding the first batch.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Study config JSON; defaults to the reduced desk-scale study.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    /// Override the method list: `all` or comma-separated names
    /// (ppd,mixture,hmm,arima).
    #[arg(long)]
    methods: Option<String>,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
}

/// Worker-pool size for benchmark replicates and per-site fits.
const WORKERS_ENV: &str = "STRANOM_WORKERS";

fn configure_workers() -> Result<(), CliError> {
    if let Ok(raw) = std::env::var(WORKERS_ENV) {
        let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::usage(format!(
                "{WORKERS_ENV} must be a positive integer, got `{raw}`"
            ))
        })?;
        // A second initialization (tests in one process) is harmless.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(args) => commands::simulate(args, seed),
        Command::Fit(args) => commands::fit(args, seed),
        Command::Detect(args) => commands::detect(args, seed),
        Command::Events(args) => commands::events(args, seed),
        Command::Cluster(args) => commands::cluster(args, seed),
        Command::Evaluate(args) => commands::evaluate(args, seed),
        Command::Recursive(args) => commands::recursive(args, seed),
        Command::Benchmark(args) => commands::benchmark(args, seed),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            emit_error(Kind::Usage, &e.render().to_string());
            std::process::exit(Kind::Usage.code());
        }
    };
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => std::process::exit(e.emit()),
    }
}
