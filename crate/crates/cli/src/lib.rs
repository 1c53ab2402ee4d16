//! The `fedkit` command line.
//!
//! Every library operation is a subcommand; `pipeline` chains subcommands
//! from a TOML file. Exit status is 0 on success, 1 when an operation
//! fails (one `error: <kind>: <message>` line on stderr) and 2 on usage
//! errors.

mod commands;
mod files;
pub mod pipeline;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedkit::postprocess::{DEFAULT_MAX_BYTES, DEFAULT_MIN_MASK_AREA};
use fedkit::DEFAULT_IOU_THRESHOLD;

pub use commands::execute;

#[derive(Debug, Parser)]
#[command(
    name = "fedkit",
    version,
    about = "Federated detection post-processing toolkit"
)]
pub struct Cli {
    /// Worker threads; defaults to one per core. Outputs do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class-wise non-maximum suppression of one prediction file.
    Nms(NmsArgs),
    /// Two-stage ensemble of several prediction files.
    Ensemble(EnsembleArgs),
    /// Label matrix for the RoIs of one image.
    Assign(AssignArgs),
    /// Masked sigmoid cross-entropy of a logits file against a label matrix.
    Loss(LossArgs),
    /// Stratified foreground/background RoI sampling.
    SampleRois(SampleRoisArgs),
    /// Round-robin split of an RoI pool into disjoint pools.
    PartitionPool(PartitionPoolArgs),
    /// Cosine learning-rate schedule.
    Lr(LrArgs),
    /// Category groups for expert models.
    SplitExperts(SplitExpertsArgs),
    /// Ground truth and verification restricted to one category group.
    FilterExpert(FilterExpertArgs),
    /// Predictions restricted to one category group.
    Restrict(RestrictArgs),
    /// Removes predictions with small masks.
    DropSmallMasks(DropSmallMasksArgs),
    /// Trims a prediction file to a byte budget.
    Trim(TrimArgs),
    /// Federated mAP of a prediction file.
    Eval(EvalArgs),
    /// Runs stages from a TOML configuration.
    Pipeline(PipelineArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Nms(_) => "nms",
            Command::Ensemble(_) => "ensemble",
            Command::Assign(_) => "assign",
            Command::Loss(_) => "loss",
            Command::SampleRois(_) => "sample-rois",
            Command::PartitionPool(_) => "partition-pool",
            Command::Lr(_) => "lr",
            Command::SplitExperts(_) => "split-experts",
            Command::FilterExpert(_) => "filter-expert",
            Command::Restrict(_) => "restrict",
            Command::DropSmallMasks(_) => "drop-small-masks",
            Command::Trim(_) => "trim",
            Command::Eval(_) => "eval",
            Command::Pipeline(_) => "pipeline",
        }
    }
}

#[derive(Debug, Args)]
pub struct NmsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Prediction files; earlier files win score ties.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
}

#[derive(Debug, Args)]
pub struct AssignArgs {
    /// RoI pool CSV.
    #[arg(long)]
    pub rois: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub verification: PathBuf,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long)]
    pub image: String,
    /// Column order (`category_id` list). Defaults to every category seen
    /// in the inputs, sorted.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct LossArgs {
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub logits: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleRoisArgs {
    #[arg(long)]
    pub rois: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub n_sample: usize,
    #[arg(long, default_value_t = 0.25)]
    pub fg_fraction: f64,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub fg_iou_threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = fedkit::io::DEFAULT_MAX_ROIS_PER_IMAGE)]
    pub max_rois_per_image: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PartitionPoolArgs {
    #[arg(long)]
    pub rois: PathBuf,
    #[arg(long)]
    pub parts: usize,
    #[arg(long, default_value_t = fedkit::io::DEFAULT_MAX_ROIS_PER_IMAGE)]
    pub max_rois_per_image: usize,
    /// Receives `part-0.csv` .. `part-<k-1>.csv`.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct LrArgs {
    /// Peak rate from the linear-scaling rule.
    #[arg(long, conflicts_with = "eta0", required_unless_present = "eta0")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eta0: Option<f64>,
    #[arg(long)]
    pub total_steps: u64,
    /// Steps to report; defaults to every step.
    #[arg(long, value_delimiter = ',')]
    pub steps: Vec<u64>,
    /// Writes the table here instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitBy {
    Rank,
    Embedding,
}

#[derive(Debug, Args)]
pub struct SplitExpertsArgs {
    #[arg(long, value_enum)]
    pub by: SplitBy,
    /// Category occurrence counts (rank splits).
    #[arg(long, required_if_eq("by", "rank"))]
    pub stats: Option<PathBuf>,
    /// First rank of the window, 0-based.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// End of the window, exclusive; defaults to the number of categories.
    #[arg(long)]
    pub end: Option<usize>,
    /// Category embeddings (embedding splits).
    #[arg(long, required_if_eq("by", "embedding"))]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub num_experts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterExpertArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub verification: PathBuf,
    #[arg(long)]
    pub group_file: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub group_index: usize,
    #[arg(long)]
    pub output_gt: PathBuf,
    #[arg(long)]
    pub output_verification: PathBuf,
    #[arg(long)]
    pub output_images: PathBuf,
}

#[derive(Debug, Args)]
pub struct RestrictArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub group_file: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub group_index: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DropSmallMasksArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MIN_MASK_AREA)]
    pub min_area: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrimArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAX_BYTES)]
    pub max_bytes: u64,
    #[arg(long)]
    pub output: PathBuf,
    /// Per-category removal counts.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Box,
    Mask,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub verification: PathBuf,
    #[arg(long)]
    pub hierarchy: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Box)]
    pub mode: Mode,
    #[arg(long, default_value_t = DEFAULT_IOU_THRESHOLD)]
    pub iou_threshold: f64,
    /// Per-category report CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `run_dir` from the configuration.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

/// Stable short name for the failure category of an error chain.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<fedkit::Error>() {
            return match e {
                fedkit::Error::InvalidBox(_) => "invalid-box",
                fedkit::Error::InvalidMask(_) => "invalid-mask",
                fedkit::Error::Parse { .. } => "parse",
                fedkit::Error::Validation(_) => "validation",
                fedkit::Error::Conflict(_) => "conflict",
                fedkit::Error::Cycle(_) => "cycle",
                fedkit::Error::InvalidArgument(_) => "invalid-argument",
                fedkit::Error::Io(_) => "io",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if let Some(e) = cause.downcast_ref::<files::ConfigError>() {
            return e.kind();
        }
    }
    "error"
}

pub(crate) fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("error: {}: {msg}", error_kind(err))
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let result = with_threads(cli.threads, || {
        let mut out = stdout.lock();
        let r = match &cli.command {
            Command::Pipeline(args) => pipeline::run_pipeline(args, &mut out),
            cmd => execute(cmd, &mut out),
        };
        let _ = out.flush();
        r
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

fn with_threads<R: Send>(
    threads: Option<u16>,
    f: impl FnOnce() -> anyhow::Result<R> + Send,
) -> anyhow::Result<R> {
    match threads {
        None => f(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(usize::from(n))
            .build()?
            .install(f),
    }
}
