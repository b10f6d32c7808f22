//! Command-line driver: dataset generation, training, evaluation, ablation
//! sweeps and plot emission.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcdg::training::AblationMode;
use dcdg::Error;

mod commands;
mod report;

pub use commands::{
    ablate, evaluate, generate_data, train, AblationRow, RunManifest, ABLATION_CSV, ABLATION_LONG_CSV,
};
pub use report::report;

#[derive(Debug, Parser)]
#[command(name = "dcdg", version = VERSION, args_override_self = true)]
#[command(about = "Semi-supervised segmentation with double-sided domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic center datasets.
    GenerateData(GenerateArgs),
    /// Train one model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test manifest.
    Evaluate(EvaluateArgs),
    /// Train every ablation mode over a list of seeds.
    Ablate(AblateArgs),
    /// Plot curves of a run directory and, optionally, an ablation table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// JSON file with a `centers` list; defaults to the two-center benchmark specs.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Protocol {
    SingleCenter,
    TwoCenter,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SingleCenter => "single-center",
            Protocol::TwoCenter => "two-center",
        })
    }
}

/// Options shared by `train` and `ablate`. Flags override the config file,
/// which overrides built-in defaults.
#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Protocol::SingleCenter)]
    pub mode: Protocol,
    /// Directory produced by `generate-data` (with `C1/` and, for two-center, `C2/`).
    /// Without it the built-in synthetic benchmark is generated in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub labeled_ratio: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Sets all three learning rates.
    #[arg(long)]
    pub lr: Option<f32>,
    /// Comma-separated channel widths, e.g. `8,16,32`.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    pub n_val: usize,
    #[arg(long, default_value_t = 20)]
    pub n_test: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub ablation: Option<AblationMode>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Debug: score the ground-truth masks against themselves.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f32,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<AblationMode>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Long-format ablation CSV written by `ablate`.
    #[arg(long)]
    pub ablation: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("DCDG_GIT_DESCRIBE"), ")");

/// Process exit status of a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Config = 2,
    Data = 3,
    TrainingAbort = 4,
    Io = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub error: anyhow::Error,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } => ExitCode::Config,
        Error::NonFinite { .. } | Error::Contract(_) => ExitCode::TrainingAbort,
        Error::Io { .. } => ExitCode::Io,
        _ => ExitCode::Data,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: exit_code(&e),
            error: e.into(),
        }
    }
}

impl CliError {
    pub fn new(code: ExitCode, error: impl Into<anyhow::Error>) -> Self {
        CliError {
            code,
            error: error.into(),
        }
    }

    pub fn context(self, msg: impl fmt::Display + Send + Sync + 'static) -> Self {
        CliError {
            code: self.code,
            error: self.error.context(msg),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

/// Data-loading parallelism from `DCDG_NUM_WORKERS` (default 1).
pub fn num_workers() -> CliResult<usize> {
    match std::env::var("DCDG_NUM_WORKERS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::new(
                ExitCode::Config,
                anyhow::anyhow!("DCDG_NUM_WORKERS must be a positive integer, got `{v}`"),
            )),
        },
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenerateData(a) => generate_data(&a).map(|_| ()),
        Command::Train(a) => train(&a).map(|_| ()),
        Command::Evaluate(a) => evaluate(&a).map(|_| ()),
        Command::Ablate(a) => ablate(&a).map(|_| ()),
        Command::Report(a) => report(&a).map(|_| ()),
    }
}
