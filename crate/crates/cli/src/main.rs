//! `rtgnn`: generate synthetic corpora, train, predict, evaluate, plot and
//! check gradients.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, missing
//! files, invalid config) and 1 for any other failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ModelSize;

/// Error reported with exit status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "rtgnn", version, about = "Traffic intention dynamics on a motion-primitive lattice")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for default file names [env: RTGNN_OUT_DIR].
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Random seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic scene corpus.
    Gen(GenArgs),
    /// Train a model on a scene corpus.
    Train(TrainArgs),
    /// Write predicted trajectories for every scene of a corpus.
    Predict(PredictArgs),
    /// Score predictions against a corpus.
    Eval(EvalArgs),
    /// Draw one scene with its trajectories as SVG.
    Plot(PlotArgs),
    /// Compare analytic gradients of a small sequence loss with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct GenArgs {
    /// Output scene file [default: <out-dir>/corpus.jsonl].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of sequences.
    #[arg(short = 'n', long)]
    pub sequences: Option<usize>,
    /// Comma-separated scenario kinds.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    pub kinds: Option<Vec<rtgnn::scenario::ScenarioKind>>,
    /// Recorded steps per sequence.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training scene file.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Validation scene file.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Checkpoint directory [default: <out-dir>/run].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Scene file.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Prediction CSV [default: <out-dir>/predictions.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the max-likelihood rollout (the default when no mode is given).
    #[arg(long)]
    pub ml: bool,
    /// Write this many sampled rollouts.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Condition on ego controls from a CSV (scene_id,step,a,omega).
    #[arg(long)]
    pub conditional: Option<PathBuf>,
    /// Horizon in steps.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Scene step to predict from.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Scene file holding the ground truth.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Prediction CSV to score.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// Roll out this checkpoint and score it.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Include the constant-velocity baseline.
    #[arg(long)]
    pub baseline: bool,
    /// Comma-separated horizons in steps.
    #[arg(long, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    /// Scene id [default: the first scene].
    #[arg(long)]
    pub scene: Option<String>,
    /// Draw max-likelihood and sampled rollouts of this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Draw predictions from a CSV instead.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    /// SVG file [default: <out-dir>/<scene>.svg].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub start: usize,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub model: Option<ModelSize>,
    /// Coordinates checked per parameter tensor.
    #[arg(long, default_value_t = 16)]
    pub coords: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_kind(s: &str) -> Result<rtgnn::scenario::ScenarioKind, String> {
    rtgnn::scenario::ScenarioKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| {
            let names: Vec<&str> = rtgnn::scenario::ScenarioKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown scenario kind `{s}` (expected one of {})", names.join(", "))
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rtgnn: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
