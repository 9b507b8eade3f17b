//! The `capsroute` command line: synthesize data, train, evaluate, predict,
//! gradient-check, count parameters and render pose perturbations.

mod commands;
mod config;
mod error;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Environment variable capping the worker threads.
pub const THREADS_ENV: &str = "CAPSROUTE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "capsroute", version, about = "Capsule-network segmentation with dynamic routing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic image/mask dataset.
    Synth(SynthArgs),
    /// Train, with k-fold cross-validation when --folds > 1.
    Train(TrainArgs),
    /// Per-sample dice of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Segment one image.
    Predict(PredictArgs),
    /// Check every parameter gradient against central differences.
    Gradcheck(GradcheckArgs),
    /// Parameter counts per layer.
    Params(ParamsArgs),
    /// Reconstructions with single pose dimensions swept.
    Perturb(PerturbArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    /// Height and width of every sample.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration file.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Dataset directory (overrides `data.path`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Train only this fold of the split.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Iteration budget per fold.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Length threshold; defaults to the model's.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Directory receiving `mask.pgm`, `lengths.pfg` and `reconstruction.pgm`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "segcaps-tiny")]
    pub preset: String,
    /// Input height and width, at most 16.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Routing iterations for every capsule layer.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Entries sampled per parameter tensor; 0 checks all of them.
    #[arg(long, default_value_t = 24)]
    pub entries: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Scale one layer's weight gradient by 1.5.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `unet` or a preset name.
    #[arg(long)]
    pub reference: Option<String>,
    /// A worked example instead of a model (`sabour-layer`).
    #[arg(long, conflicts_with_all = ["preset", "config", "reference"])]
    pub example: Option<String>,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `a..b` or a comma list; defaults to every pose dimension.
    #[arg(long)]
    pub dims: Option<String>,
    /// Deltas span `[-range, range]`.
    #[arg(long, default_value_t = 0.25)]
    pub range: f64,
    #[arg(long, default_value_t = 5)]
    pub steps: usize,
    /// Composite PGM, one row per dimension and one column per delta.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
}

fn configure_threads() -> CliResult<()> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(()),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
            capsroute::set_thread_count(n).map_err(|e| CliError::Usage(e.to_string()))
        }
    }
}

/// Execute one command, writing its report to `out`.
pub fn execute(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth(a) => commands::synth(&a, out),
        Command::Train(a) => commands::train(&a, out),
        Command::Eval(a) => commands::eval(&a, out),
        Command::Predict(a) => commands::predict(&a, out),
        Command::Gradcheck(a) => commands::gradcheck(&a, out),
        Command::Params(a) => commands::params(&a, out),
        Command::Perturb(a) => commands::perturb(&a, out),
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = configure_threads().and_then(|()| execute(cli.command, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
