//! `siam3d`: synthesize phantom datasets, pretrain encoders, extract
//! features, evaluate linear probes and run sweeps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "siam3d", version, about = "Imbalance-aware 3D self-supervised learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic imbalanced phantom dataset.
    Synth(SynthArgs),
    /// Train an encoder with the Siamese objective.
    Pretrain(PretrainArgs),
    /// Write a feature table for a dataset.
    Extract(ExtractArgs),
    /// Cross-validate a linear probe on a feature table.
    Evaluate(EvaluateArgs),
    /// Pretrain, extract and evaluate over a range of one parameter.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Class count, or comma-separated class names.
    #[arg(long)]
    pub classes: Option<String>,
    /// Relative class sizes such as 250:76.
    #[arg(long, default_value = "250:76")]
    pub ratio: String,
    /// Total samples; defaults to the sum of the ratio.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub extent: usize,
    #[arg(long, default_value_t = 1.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long, default_value = "none", value_parser = ["none", "re", "se"])]
    pub mode: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 10)]
    pub q: usize,
    #[arg(long, default_value_t = 6)]
    pub m: usize,
    #[arg(long, default_value_t = 6)]
    pub batch: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long, default_value = "desk", value_parser = ["desk", "paper"])]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// JSON file whose fields override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, log and config echo.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "concat", value_parser = ["trad", "ssl", "concat"])]
    pub features: String,
    /// Use an untrained encoder initialized from --seed.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feature CSV path; the schema is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Feature CSV written by `extract`.
    #[arg(long)]
    pub features: PathBuf,
    /// Columns to use; defaults to every column in the table.
    #[arg(long, value_parser = ["trad", "ssl", "concat"])]
    pub set: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1.0)]
    pub label_budget: f64,
    #[arg(long)]
    pub minor_class: Option<usize>,
    #[arg(long)]
    pub positive_class: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for metrics and the correlation histogram.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["k", "batch"])]
    pub param: String,
    /// Comma-separated values; for k, 0 trains without SE.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Feature set the probe is trained on.
    #[arg(long, default_value = "ssl", value_parser = ["trad", "ssl", "concat"])]
    pub features: String,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Sweep points run in parallel; defaults to the available cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Extract(a) => commands::extract(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
