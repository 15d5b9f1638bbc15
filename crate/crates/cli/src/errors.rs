//! Exit-code taxonomy and the machine-readable error report.
//!
//! Usage errors (bad flags or flag combinations) exit 2, data errors
//! (unreadable or schema-violating inputs, invalid config files) exit 3,
//! and numerical errors (diverged chains, non-positive-definite covariance,
//! non-converged estimators) exit 4. Every failure prints a one-line JSON
//! object to stderr.

use stranom::benchmark::BenchmarkError;
use stranom::covariance::CovarianceError;
use stranom::detectors::DetectorError;
use stranom::evaluate::EvalError;
use stranom::impale::ImpaleError;
use stranom::model::ModelError;
use stranom::network::NetworkError;
use stranom::recursive::RecursiveError;
use stranom::simulate::SimError;
use stranom::IoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
    Numerical,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::Data => "data",
            Kind::Numerical => "numerical",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    /// Prints the JSON error report to stderr and returns the exit code.
    pub fn emit(&self) -> i32 {
        emit_error(self.kind, &self.message);
        self.kind.code()
    }
}

pub fn emit_error(kind: Kind, message: &str) {
    eprintln!(
        "{}",
        serde_json::json!({ "error": { "kind": kind.as_str(), "message": message } })
    );
}

/// Prints one line to stdout. A closed pipe (e.g. `| head`) ends the run
/// quietly; any other write failure is reported as a data error.
pub fn print_line(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let res = writeln!(out, "{text}").and_then(|()| out.flush());
    if let Err(e) = res {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        emit_error(Kind::Data, &format!("cannot write to stdout: {e}"));
        std::process::exit(Kind::Data.code());
    }
}

fn of(kind: Kind, err: impl std::fmt::Display) -> CliError {
    CliError {
        kind,
        message: err.to_string(),
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        of(Kind::Data, e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        of(Kind::Data, e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        of(Kind::Data, e)
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        of(Kind::Data, e)
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        of(Kind::Data, e)
    }
}

fn covariance_kind(e: &CovarianceError) -> Kind {
    match e {
        CovarianceError::InvalidParams(_) => Kind::Data,
        CovarianceError::NotPositiveDefinite => Kind::Numerical,
    }
}

fn model_kind(e: &ModelError) -> Kind {
    match e {
        ModelError::DivergentChain { .. } => Kind::Numerical,
        ModelError::Covariance(inner) => covariance_kind(inner),
        _ => Kind::Data,
    }
}

impl From<CovarianceError> for CliError {
    fn from(e: CovarianceError) -> Self {
        of(covariance_kind(&e), e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        of(model_kind(&e), e)
    }
}

impl From<DetectorError> for CliError {
    fn from(e: DetectorError) -> Self {
        let kind = match &e {
            DetectorError::InvalidInput(_) => Kind::Data,
            DetectorError::RefitFailed(inner) => model_kind(inner),
            _ => Kind::Numerical,
        };
        of(kind, e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidConfig(_) => of(Kind::Data, e),
            SimError::Network(inner) => inner.into(),
            SimError::Covariance(inner) => inner.into(),
            SimError::Model(inner) => inner.into(),
        }
    }
}

impl From<ImpaleError> for CliError {
    fn from(e: ImpaleError) -> Self {
        match e {
            ImpaleError::Detector(inner) => inner.into(),
            _ => of(Kind::Data, e),
        }
    }
}

impl From<RecursiveError> for CliError {
    fn from(e: RecursiveError) -> Self {
        match e {
            RecursiveError::Model(inner) => inner.into(),
            RecursiveError::Detector(inner) => inner.into(),
            _ => of(Kind::Data, e),
        }
    }
}

impl From<BenchmarkError> for CliError {
    fn from(e: BenchmarkError) -> Self {
        match e {
            BenchmarkError::Simulation(inner) => inner.into(),
            BenchmarkError::Model(inner) => inner.into(),
            BenchmarkError::Detector(inner) => inner.into(),
            _ => of(Kind::Data, e),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Network(inner) => inner.into(),
            IoError::Model(inner) => inner.into(),
            _ => of(Kind::Data, e),
        }
    }
}
