//! `ordepth`: command-line entry point.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 usage error
//! (bad flags, unreadable or malformed input files).

mod annotate;
mod data;
mod experiment;
mod gradcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ordepth", version, about = "Ordinal depth supervision for 3D human pose: data, training, checks and annotation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample synthetic poses and write an item registry plus ground-truth relations.
    GenData(data::GenDataArgs),
    /// Train one experiment configuration and write its report and checkpoints.
    Train(experiment::TrainArgs),
    /// Re-evaluate saved checkpoints on their held-out split.
    Eval(experiment::EvalArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Drive annotation sessions with a simulated annotator.
    AnnotateSim(annotate::SimArgs),
    /// Monte Carlo study of the number of questions per pose.
    AnnotateCost(annotate::CostArgs),
    /// Serve the annotation API and the static UI bundle.
    Serve(annotate::ServeArgs),
    /// Fetch the relation set of a completed session.
    ExportRelations(annotate::ExportArgs),
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Check(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) | Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "usage error: {e:#}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<ordepth_core::Error> for Failure {
    fn from(e: ordepth_core::Error) -> Self {
        use ordepth_core::Error as E;
        match e {
            E::InvalidInput(_) | E::Format(_) | E::Json(_) | E::Io(_) | E::Dimension { .. } | E::Index { .. } => {
                Failure::Usage(e.into())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<ordepth_client::ClientError> for Failure {
    fn from(e: ordepth_client::ClientError) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<ordepth_service::ServiceError> for Failure {
    fn from(e: ordepth_service::ServiceError) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), Failure>;

/// Reads a file, reporting a missing or unreadable path as a usage error.
pub fn read_input(path: &std::path::Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(anyhow::anyhow!("{}: {e}", path.display())))
}

pub fn write_output(path: &std::path::Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
    }
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

/// Default data directory, overridable through `ORDEPTH_DATA_DIR`.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("ORDEPTH_DATA_DIR").map_or_else(|| PathBuf::from("data"), PathBuf::from)
}

fn init_logging(default: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" });
    let result = match cli.command {
        Command::GenData(a) => data::gen_data(a),
        Command::Train(a) => experiment::train(a),
        Command::Eval(a) => experiment::eval(a),
        Command::Gradcheck(a) => gradcheck::run(a),
        Command::AnnotateSim(a) => annotate::simulate(a),
        Command::AnnotateCost(a) => annotate::cost(a),
        Command::Serve(a) => annotate::serve(a),
        Command::ExportRelations(a) => annotate::export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.code())
        }
    }
}
