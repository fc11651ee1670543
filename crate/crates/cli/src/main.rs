//! `bline`: synthetic data generation, training, inference, ensembling,
//! fusion and evaluation for B-line detection.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
//! failure.

mod commands;
mod failure;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "bline", version, about = "B-line detection and localization in lung ultrasound")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset.
    Synth(SynthArgs),
    /// Write a patient-level test/fold split for a dataset.
    Split(SplitArgs),
    /// Train one fold, or all five with --cv.
    Train(TrainArgs),
    /// Predict the validation fold and test videos with one checkpoint.
    Predict(PredictArgs),
    /// Combine five fold instances into ensemble predictions.
    Ensemble(EnsembleArgs),
    /// Fuse clip-, frame- and pixel-level decisions.
    Fuse(FuseArgs),
    /// Compute detection (and localization) metrics from predictions.
    Evaluate(EvaluateArgs),
    /// Print reports as a table.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub patients: usize,
    #[arg(long, default_value_t = 6)]
    pub videos_per_patient: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_fraction: f64,
    /// Fixed frame count per video (durations vary otherwise).
    #[arg(long)]
    pub frames_per_video: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; defaults to <data>/split.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model directory; fold checkpoints go to <out>/fold<k>.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration document (JSON); flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Split manifest; defaults to <data>/split.json.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub lr_halving_patience: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Validation fold to hold out.
    #[arg(long, conflicts_with = "cv", default_value_t = 0)]
    pub fold: usize,
    /// Train all five folds.
    #[arg(long)]
    pub cv: bool,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory (one fold).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Expected prediction level of the checkpoint.
    #[arg(long)]
    pub level: Option<String>,
    /// mean, max or max_moving_avg[:w] (clip and frame levels).
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Model directory holding fold<k> checkpoints (all levels).
    #[arg(long, requires = "data", conflicts_with = "predictions")]
    pub model_dir: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Per-instance predictions.jsonl files (clip and frame levels).
    #[arg(long, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Model id of the ensemble; defaults to the members' id.
    #[arg(long)]
    pub model_id: Option<String>,
    #[arg(long, default_value = "max")]
    pub aggregation: String,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub frame: PathBuf,
    #[arg(long)]
    pub pixel: PathBuf,
    /// majority or unanimous.
    #[arg(long, default_value = "majority")]
    pub mode: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Pixel-level detections; enables localization metrics.
    #[arg(long, requires = "data")]
    pub detections: Option<PathBuf>,
    /// Dataset with reference annotations.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fixed decision threshold instead of validation calibration.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// report.json files or directories containing one.
    #[arg(required = true, num_args = 1..)]
    pub reports: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Ensemble(a) => commands::ensemble(&a),
        Command::Fuse(a) => commands::fuse(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
