//! `reefcond`: ingest → split → train → predict → ensemble → evaluate →
//! analyze → query, one subcommand per stage.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reefcond::manifest::Split;

#[derive(Parser, Debug)]
#[command(name = "reefcond", version, about = "Multi-label coral condition classification")]
pub struct Cli {
    /// Treat manifest validation warnings as errors.
    #[arg(long, global = true)]
    pub schema_check: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Tile labeled survey images into a manifest and patch directory.
    Ingest(IngestArgs),
    /// Assign train/test splits.
    Split(SplitArgs),
    /// Fine-tune a backbone on the train split.
    Train(TrainArgs),
    /// Write a prediction file for one split of a manifest.
    Predict(PredictArgs),
    /// Average several prediction files and re-threshold.
    Ensemble(EnsembleArgs),
    /// Score predictions against manifest labels.
    Evaluate(EvaluateArgs),
    /// False-negative/false-positive table and co-prediction breakdown.
    Analyze(AnalyzeArgs),
    /// Retrieve patches by label expression.
    Query(QueryArgs),
    /// Write a labeled synthetic dataset (for smoke tests).
    Synth(SynthArgs),
    /// List known backbones.
    Backbones,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Directory the label sheet's image paths are relative to.
    #[arg(long)]
    pub images: PathBuf,
    /// CSV with columns image,site,labels[,row,col].
    #[arg(long)]
    pub labels: PathBuf,
    /// Output directory (manifest.jsonl + patches/).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub tile_size: u32,
    /// Defaults to the tile size.
    #[arg(long)]
    pub stride: Option<u32>,
    /// Keep zero-padded edge tiles instead of dropping them.
    #[arg(long)]
    pub keep_partial: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Image,
    Patch,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Granularity::Image)]
    pub granularity: Granularity,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Patch directory; defaults to `patches/` beside the manifest.
    #[arg(long)]
    pub patches: Option<PathBuf>,
    #[arg(long, default_value = "resnet50")]
    pub backbone: String,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 25_000)]
    pub iterations: u64,
    /// Network input side; defaults to the backbone's native resolution.
    #[arg(long)]
    pub resolution: Option<u32>,
    #[arg(long)]
    pub hflip: bool,
    /// Start from seeded random weights instead of a pretrained bundle.
    #[arg(long)]
    pub scratch: bool,
    /// Print the loss every N iterations to stderr (0 = silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Test,
    Unassigned,
    All,
}

impl SplitFilter {
    pub fn admits(self, s: Split) -> bool {
        match self {
            SplitFilter::Train => s == Split::Train,
            SplitFilter::Test => s == Split::Test,
            SplitFilter::Unassigned => s == Split::Unassigned,
            SplitFilter::All => true,
        }
    }
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub patches: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    pub split: SplitFilter,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Prediction files over the same patches.
    #[arg(required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    pub split: SplitFilter,
    /// Re-threshold stored probabilities instead of using stored labels.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Row label in the rendered table.
    #[arg(long)]
    pub model_name: Option<String>,
    /// Take the model name and parameter count from a checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// CSV `class,fn,fp` of precomputed counts.
    #[arg(long, conflicts_with_all = ["manifest", "predictions"])]
    pub counts: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitFilter::Test)]
    pub split: SplitFilter,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    Truth,
    Predicted,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub source: QuerySource,
    /// Required when `--source predicted`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub require: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub forbid: Vec<String>,
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub side: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
