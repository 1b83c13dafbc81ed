use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pixeldit", version, about = "Train, sample and cost out dual-level pixel diffusion transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model described by a run config.
    Train(TrainArgs),
    /// Generate images from a checkpoint.
    Sample(SampleArgs),
    /// Run the finite-difference gradient suite.
    GradCheck,
    /// Forward FLOPs for a preset or config.
    Flops(CostArgs),
    /// Parameter counts for a preset or config.
    Params(CostArgs),
    /// Train and compare several configurations.
    Ablate(AblateArgs),
    /// Write a toy dataset to disk as netpbm images.
    MakeData(MakeDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override any config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// train.total_steps
    #[arg(long)]
    pub steps: Option<u64>,
    /// train.seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// train.lr
    #[arg(long)]
    pub lr: Option<f64>,
    /// train.batch_size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// model.variant
    #[arg(long)]
    pub variant: Option<String>,
    /// paths.checkpoint_dir
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// paths.metrics
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from a trainer checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Class id(s), comma separated.
    #[arg(long = "class", value_delimiter = ',', required = true)]
    pub classes: Vec<usize>,
    /// Images per class.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Run config whose `[sampler]` section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg: Option<f64>,
    /// Guidance interval `lo,hi`.
    #[arg(long, value_parser = parse_interval)]
    pub interval: Option<[f64; 2]>,
    #[arg(long)]
    pub shift: Option<f64>,
    /// euler, heun or flow_dpm.
    #[arg(long)]
    pub solver: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the EMA weights stored in a trainer checkpoint.
    #[arg(long)]
    pub ema: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// B, L or XL.
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub preset: Option<String>,
    /// Run config; its `[model]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override `model.*` keys of the preset or config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Resolution `HxW` (defaults to the model's).
    #[arg(long)]
    pub resolution: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Sweep file with a `[base]` run config and `[[run]]` entries.
    #[arg(long)]
    pub sweep: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optional SVG loss chart.
    #[arg(long)]
    pub chart: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MakeDataArgs {
    /// Run config whose `[dataset]` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override `dataset.*` keys, e.g. `--set dataset.noise_std=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// solid_color, gaussian_blob or checkerboard_freq.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// `HxW`.
    #[arg(long)]
    pub resolution: Option<String>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_interval(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok([num(lo)?, num(hi)?])
}
