mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Early-exit spectral classification: data generation, training,
/// evaluation, budget curves, allocation heatmaps, edge simulation and sweeps.
#[derive(Parser, Debug)]
#[command(name = "scai", version)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed every random stream is derived from.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory all artifacts are written to.
    #[arg(long, global = true, env = "SCAI_OUT_DIR", default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset (`dataset.csv`).
    Gen(GenArgs),
    /// Train a model; writes `<name>.ckpt` and `<name>_train.csv`.
    Train(TrainArgs),
    /// Per-exit test accuracy, loss and cost (`<stem>_eval.csv`, `<stem>_costs.csv`).
    Eval(EvalArgs),
    /// Accuracy against budget for anytime and budgeted prediction.
    Curves(CurvesArgs),
    /// Mean units executed per block position over the test split.
    Heatmap(EvalArgs),
    /// Simulate devices that exit early or offload to a compute center.
    Simulate(SimulateArgs),
    /// Train and score every configuration on a hyperparameter grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Recipe TOML replacing the built-in recipes.
    #[arg(long)]
    pub recipes: Option<PathBuf>,
    /// Curve length; defaults to the model input width.
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArg {
    /// Dataset CSV; defaults to `<out>/dataset.csv`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelOverrides {
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Residual units in every block.
    #[arg(long)]
    pub units: Option<usize>,
    /// Channels of the first block; later blocks double it.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Plain residual blocks instead of position-adaptive ones.
    #[arg(long)]
    pub no_pa: bool,
    /// Train every exit on hard labels instead of distilling from the last exit.
    #[arg(long)]
    pub no_distill: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Artifact name; defaults to `scai`, `scai_plus` or `scai_plus_nokd`.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArg,
}

#[derive(Args, Debug)]
pub struct CurvesArgs {
    /// One or more checkpoints, e.g. the SCAI, SCAI+ and no-distillation variants.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
    #[command(flatten)]
    pub data: DataArg,
    /// Budget grid as fractions of the last exit's cost; pass no values for an empty grid.
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[command(flatten)]
    pub data: DataArg,
    /// Threshold CSV (`exit_index,theta`); calibrated on the validation split when absent.
    #[arg(long)]
    pub thresholds: Option<PathBuf>,
    /// Batch budget fraction used for calibration.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// TOML grid (`blocks`, `units`, `epsilon`, `gamma` arrays); the config's `[sweep]` table otherwise.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelOverrides,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(written) => {
            for path in written {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
