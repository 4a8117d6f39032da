//! The batch commands. Each takes its parsed flags and the run configuration.

mod data;
mod eval;
mod train;

use std::path::PathBuf;

use clap::Args;

pub use data::{cmd_augment, cmd_histogram, cmd_phantom, cmd_preprocess};
pub use eval::{cmd_compare, cmd_evaluate};
pub use train::{cmd_predict, cmd_train, run_meta};

#[derive(Args, Debug, Clone, Default)]
pub struct PhantomArgs {
    /// Number of volumes to generate.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct HistogramArgs {
    /// NIfTI volume to summarize.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = -1000.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 1500.0, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 10.0)]
    pub bin_width: f64,
    /// CSV of bin edges and counts.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional bar-chart graymap.
    #[arg(long)]
    pub image: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct AugmentArgs {
    #[arg(long)]
    pub in_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Total output pairs, originals included.
    #[arg(long)]
    pub target_count: usize,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Validation slices; without it the data directory is split.
    #[arg(long)]
    pub val_dir: Option<PathBuf>,
    /// Checkpoint path; history, split and curves are written beside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many epochs in this invocation.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of `*_img.nii` slices or volumes.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred_dir: PathBuf,
    #[arg(long)]
    pub truth_dir: PathBuf,
    /// Report path; ROC, IoU histogram, confusion and per-slice files go beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct CompareArgs {
    #[arg(long)]
    pub report_a: PathBuf,
    #[arg(long)]
    pub report_b: PathBuf,
    /// CSV with one row per metric.
    #[arg(long)]
    pub out: PathBuf,
}
