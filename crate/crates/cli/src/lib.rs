//! Command-line front end: dataset ingestion and balancing, training runs,
//! prediction, evaluation, late fusion and the ablation report.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wastebench_core::metrics::BaselineBasis;

pub mod config;
mod dataset;
pub mod error;
mod evaluate;
mod run;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "wastebench", version, about = "Aerial landfill classification benchmark harness")]
pub struct Cli {
    /// Run configuration merged over the built-in defaults.
    #[arg(long, global = true, env = "WASTEBENCH_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Apply label corrections, split, and materialize the dataset tree.
    Ingest,
    /// Add augmented minority-class copies until the training classes match.
    Balance,
    /// Train a model and write its checkpoint, history and predictions.
    Train(TrainArgs),
    /// Write class probabilities of a checkpoint for a folder of images.
    Predict(PredictArgs),
    /// Metrics, ROC curves and baseline comparison for prediction files.
    Evaluate(EvaluateArgs),
    /// Average the probabilities of several prediction files.
    Fuse(FuseArgs),
    /// Summarize every training run under the output root.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Architecture name or `parallel_ensemble`; defaults to the config model.
    #[arg(long)]
    pub model: Option<String>,
    /// Optimizer kind, or `all` for one run per optimizer.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Seed of initialization, shuffling and augmentation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Freeze this many leading parameterized layers.
    #[arg(long)]
    pub freeze: Option<usize>,
    /// Override train.max_epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of images, or a labeled `negative/` + `positive/` tree.
    /// Defaults to the test split of the dataset root.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, required = true, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Display names, one per file; defaults to the file stems.
    #[arg(long, num_args = 1..)]
    pub names: Vec<String>,
    /// Baseline rows to compare against, one per file.
    #[arg(long, num_args = 1..)]
    pub baseline: Vec<String>,
    /// Report row compared with the baseline; defaults to report.basis.
    #[arg(long, value_parser = parse_basis)]
    pub basis: Option<BaselineBasis>,
    /// Output directory; defaults to <output_root>/evaluation.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long, required = true, num_args = 2..)]
    pub inputs: Vec<PathBuf>,
    /// Model names, one per input; defaults to the file stems.
    #[arg(long, num_args = 1..)]
    pub names: Vec<String>,
    /// `three_model`: inputs are the parallel ensemble, mobilevit_xs and
    /// vit_tiny_r_s16_p8_224, compared with the published fusion rows.
    #[arg(long)]
    pub preset: Option<String>,
    /// Fuse the filenames shared by every input instead of failing.
    #[arg(long)]
    pub allow_intersection: bool,
    /// Fused prediction file; defaults to <output_root>/fusion/fused.csv.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report row compared with the baselines; defaults to report.basis.
    #[arg(long, value_parser = parse_basis)]
    pub basis: Option<BaselineBasis>,
}

fn parse_basis(s: &str) -> Result<BaselineBasis, String> {
    match s {
        "weighted" => Ok(BaselineBasis::Weighted),
        "positive" | "positive_class" => Ok(BaselineBasis::PositiveClass),
        _ => Err(format!("expected `weighted` or `positive`, got `{s}`")),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::from_env(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest => dataset::ingest(&config),
        Command::Balance => dataset::balance(&config),
        Command::Train(args) => run::train(&config, &args),
        Command::Predict(args) => run::predict(&config, &args),
        Command::Evaluate(args) => evaluate::evaluate(&config, &args),
        Command::Fuse(args) => evaluate::fuse(&config, &args),
        Command::Report(args) => evaluate::report(&config, &args),
    }
}
