//! `canopy`: synthetic scenes to canopy height maps, one step per subcommand.
//!
//!   canopy simulate --size 256 --seed 7
//!   canopy fit-coherence --resolution 20
//!   canopy train --combo all,hh,hv --model nested --seed 1
//!   canopy evaluate
//!   canopy report

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "canopy", version, about = "Canopy height retrieval from InSAR coherence and backscatter")]
pub struct Cli {
    /// Directory under which default outputs are placed.
    #[arg(long, global = true, env = "CANOPY_OUTPUT_ROOT", default_value = "runs")]
    pub root: PathBuf,

    /// TOML settings file, or a run manifest to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene directory.
    Simulate(SimulateArgs),
    /// Fit per-pixel coherence decay maps at one resolution.
    FitCoherence(FitArgs),
    /// Assemble a feature stack for a band combination.
    BuildStack(BuildArgs),
    /// Train a UNet-family network.
    Train(TrainArgs),
    /// Fit a pixelwise baseline (mlr, knn, rf).
    Baseline(BaselineArgs),
    /// Write a height map from a trained model.
    Predict(PredictArgs),
    /// Score a trained model on its held-out test patches.
    Evaluate(EvaluateArgs),
    /// Summarize evaluation rows as an RMSE table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene width and height, pixels.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pixel spacing, m.
    #[arg(long)]
    pub spacing: Option<f64>,
    /// True coherence and speckle-free intensities.
    #[arg(long)]
    pub ideal: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Mapping unit, m.
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Where a feature stack comes from: a prebuilt stack directory, or a scene
/// (with optional fitted decay maps) plus combo and resolution.
#[derive(Debug, Args)]
pub struct SourceArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub stack: Option<PathBuf>,
    /// Directory written by fit-coherence.
    #[arg(long)]
    pub decay: Option<PathBuf>,
    /// Band combination, e.g. "all,hh,hv" or "sigma+coh14,hv".
    #[arg(long)]
    pub combo: Option<String>,
    #[arg(long)]
    pub resolution: Option<u32>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub decay: Option<PathBuf>,
    #[arg(long)]
    pub combo: Option<String>,
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Patch edge, pixels.
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// vanilla, nested or se.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long)]
    pub se_reduction: Option<usize>,
    /// Initialization and shuffling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Early-stopping patience in epochs; 0 disables it.
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// mlr, knn or rf.
    #[arg(long)]
    pub kind: Option<String>,
    /// Neighbours for knn.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    #[arg(long)]
    pub min_leaf: Option<usize>,
    #[arg(long)]
    pub max_features: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint or baseline file.
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub decay: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model_file: Option<PathBuf>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub stack: Option<PathBuf>,
    #[arg(long)]
    pub decay: Option<PathBuf>,
    /// CSV file the result row is appended to.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn one_line(e: &anyhow::Error) -> String {
    e.chain().map(|c| c.to_string()).collect::<Vec<_>>().join(": ").replace('\n', " ")
}
