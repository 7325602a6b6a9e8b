use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::Concentration;
use crate::optim::OptimizerMode;

#[derive(Debug, Parser)]
#[command(name = "qlocal", version, about = "8-bit client-side Adam for federated learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one federated experiment.
    Run(RunArgs),
    /// Run one experiment per value along an axis and tabulate the results.
    Sweep(SweepArgs),
    /// Standalone studies.
    Analysis(AnalysisArgs),
}

/// Every field is optional so flags can override a config file, which in turn
/// overrides the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON file with run settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replay a saved manifest. Only --out and --threads may be combined with it.
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<OptimizerMode>,
    /// Dirichlet concentration, or `iid`.
    #[arg(long)]
    pub alpha: Option<Concentration>,
    #[arg(long)]
    pub clients: Option<usize>,
    #[arg(long = "per-round")]
    pub per_round: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub beta1: Option<f32>,
    #[arg(long)]
    pub beta2: Option<f32>,
    #[arg(long)]
    pub eps: Option<f32>,
    #[arg(long = "block-size")]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// `synthetic` or `file:<path>`.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long = "train-size")]
    pub train_size: Option<usize>,
    #[arg(long = "test-size")]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long = "class-sep")]
    pub class_sep: Option<f32>,
    /// Tail share of a file dataset held out for testing.
    #[arg(long = "test-fraction")]
    pub test_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Cap on worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Suppress the per-round progress lines.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepAxis {
    Mode,
    Alpha,
    BlockSize,
    Lr,
    Seed,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub axis: SweepAxis,
    /// Comma-separated values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Modes to cross with the axis (ignored for the mode axis).
    #[arg(long, value_delimiter = ',')]
    pub modes: Option<Vec<OptimizerMode>>,
    #[command(flatten)]
    pub base: RunArgs,
}

#[derive(Debug, Args)]
pub struct AnalysisArgs {
    #[command(subcommand)]
    pub study: Study,
}

#[derive(Debug, Subcommand)]
pub enum Study {
    /// Log-space vs dynamic-tree error on log-uniform data.
    Precision {
        #[arg(long, default_value_t = 3000)]
        n: usize,
        #[arg(long, default_value_t = 1e-7)]
        lo: f64,
        #[arg(long, default_value_t = 1.0)]
        hi: f64,
        #[arg(long = "block-size", default_value_t = 64)]
        block_size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Moment histograms after a short warmup.
    Histograms {
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = OptimizerMode::Fp32)]
        mode: OptimizerMode,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Optimizer memory for a list of parameter counts.
    Scaling {
        /// Parameter counts; scientific notation accepted.
        #[arg(long, value_delimiter = ',', default_value = "10e6,100e6,1e9,10e9")]
        params: Vec<String>,
        #[arg(long = "block-size", default_value_t = 64)]
        block_size: usize,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
}
