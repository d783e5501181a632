use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "motionseg", version, about = "BEV LiDAR moving-object segmentation toolkit")]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Plain-text `key=value` file; explicit flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic labeled dataset in KITTI layout.
    Synth(SynthArgs),
    /// Paste synthetic movers into motionless runs of a dataset.
    Augment(AugmentArgs),
    /// Rasterize a dataset into window files and a manifest.
    Preprocess(PreprocessArgs),
    /// Train a model on preprocessed windows.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Write predicted masks for every window.
    Infer(InferArgs),
    /// Time forward passes on one window.
    Bench(BenchArgs),
    /// Render windows (and optionally predictions) as PPM/PGM images.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub moving_cars: usize,
    #[arg(long, default_value_t = 10)]
    pub parked_cars: usize,
    #[arg(long, default_value_t = 40)]
    pub static_objects: usize,
    /// Number of sequences (taken from the end) generated without movers.
    #[arg(long, default_value_t = 0)]
    pub motionless_sequences: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub common: Common,
    /// Input dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n_frames: usize,
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub dx_min: f64,
    #[arg(long, default_value_t = 1.5, allow_hyphen_values = true)]
    pub dx_max: f64,
    #[arg(long, default_value_t = -0.2, allow_hyphen_values = true)]
    pub dy_min: f64,
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    pub dy_max: f64,
    /// Optional `key=value` label map (moving ids, car id, moving-car id).
    #[arg(long)]
    pub label_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root (KITTI layout).
    #[arg(long)]
    pub data: PathBuf,
    /// `desk` (96×64) or `paper` (480×320).
    #[arg(long, default_value = "desk")]
    pub grid: String,
    #[arg(long, default_value = "mul")]
    pub residual: String,
    /// Minimum moving points for a window to be kept.
    #[arg(long, default_value_t = 20)]
    pub threshold: usize,
    /// Keep every window regardless of moving points.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub label_map: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub residual: Option<String>,
    /// `desk` or `paper` channel widths.
    #[arg(long, default_value = "desk")]
    pub scale: String,
    /// `parallel` or `sequential` downsampling blocks.
    #[arg(long, default_value = "parallel")]
    pub block_style: String,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory produced by `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f32,
    #[arg(long, default_value_t = 1.02)]
    pub epsilon: f64,
    /// Sequence id held out for validation.
    #[arg(long, default_value = "08")]
    pub holdout: String,
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Sequence id to evaluate, or `all`.
    #[arg(long, default_value = "08")]
    pub split: String,
    /// `fp32`, `fp16`, `int8` or `all`.
    #[arg(long, default_value = "fp32")]
    pub precision: String,
    /// Windows used for int8 activation calibration.
    #[arg(long, default_value_t = 10)]
    pub calib_windows: usize,
    #[arg(long, default_value_t = 12)]
    pub batch_size: usize,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "fp32")]
    pub precision: String,
    #[arg(long, default_value_t = 10)]
    pub calib_windows: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value = "fp32")]
    pub precision: String,
    #[arg(long, default_value_t = 10)]
    pub calib_windows: usize,
}

#[derive(Args, Debug)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Window id (e.g. `08_000012`); all windows when omitted.
    #[arg(long)]
    pub window: Option<String>,
    /// Render predictions from this checkpoint as well.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}
