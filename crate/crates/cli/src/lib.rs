//! Command-line front end for `stochdet`: scene simulation, toy training,
//! multi-run detection, accumulation, evaluation, pseudo-labeling,
//! finetuning studies and the size-bucket sweep.

pub mod commands;
pub mod experiments;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use stochdet::dataio::Metadata;
use stochdet::{Error, Result};

pub use commands::run;

#[derive(Debug, Parser)]
#[command(
    name = "stochdet",
    version,
    about = "Stochastic accumulation experiments on a toy diffusion detector"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct GlobalArgs {
    /// Base seed; each command documents what it seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(
        long,
        global = true,
        env = "STOCHDET_OUT_DIR",
        default_value = "stochdet-out"
    )]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Box,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherArg {
    /// Label with the checkpoint as given.
    Source,
    /// Label with the checkpoint finetuned on the labeled scenes.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MapVariant {
    /// mAP averaged over IoU 0.50:0.05:0.95.
    Coco,
    /// mAP at IoU 0.5.
    Map50,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct DomainArgs {
    /// Bundled preset: source or target.
    #[arg(long, default_value = "source")]
    pub domain: String,
    /// TOML domain description; overrides --domain.
    #[arg(long)]
    pub domain_config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene dataset from a domain description.
    Simulate(SimulateArgs),
    /// Train the toy denoiser on simulated scenes.
    TrainToy(TrainToyArgs),
    /// Run the sampler several times per image.
    Detect(DetectArgs),
    /// Merge the runs of a multi-run detection file and suppress duplicates.
    Accumulate(AccumulateArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
    /// Turn accumulated detections into weighted pseudo-labels.
    Pseudolabel(PseudolabelArgs),
    /// Finetune with pseudo-labels and compare against the supervised baseline.
    Finetune(FinetuneArgs),
    /// Size-bucket mAP over run counts, box budgets and box-size factors.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub domain: DomainArgs,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    /// Index of the first scene in the domain's stream.
    #[arg(long, default_value_t = 0)]
    pub first: usize,
    /// Store feature grids in the scene file instead of regenerating them.
    #[arg(long)]
    pub embed_features: bool,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct TrainToyArgs {
    #[command(flatten)]
    pub domain: DomainArgs,
    #[arg(long, default_value_t = 200)]
    pub scenes: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<Optimizer>,
    /// Noisy proposals per training image.
    #[arg(long)]
    pub proposals: Option<usize>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene file written by `simulate`.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value_t = 300)]
    pub boxes: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub f_box_size: f64,
    /// Fresh noise per sampling step, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct AccumulateArgs {
    /// Multi-run detection file.
    #[arg(long)]
    pub runs_file: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
    #[arg(long)]
    pub class_agnostic: bool,
    /// Use only runs 1..=N of each image.
    #[arg(long)]
    pub max_runs: Option<usize>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Scopes to report.
    #[arg(long, value_delimiter = ',', default_value = "all,small,medium,large")]
    pub buckets: Vec<String>,
    #[arg(long, value_enum, default_value_t = MapVariant::Coco)]
    pub map_variant: MapVariant,
    #[arg(long, default_value_t = 100)]
    pub max_detections: usize,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct PseudolabelArgs {
    /// Accumulated detection file.
    #[arg(long)]
    pub detections: PathBuf,
    /// Scene file the detections were made on (for image sizes).
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// JSON verified-region set; keeps only labels inside a region.
    #[arg(long)]
    pub regions: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub containment: f64,
    /// With --regions: emit these ground-truth boxes inside the regions instead.
    #[arg(long, requires = "regions")]
    pub ground_truth: Option<PathBuf>,
    /// Give every label weight 1.
    #[arg(long)]
    pub unweighted: bool,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct FinetuneArgs {
    /// Source-trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "target")]
    pub domain: String,
    #[arg(long)]
    pub domain_config: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub labeled_count: usize,
    #[arg(long, default_value_t = 100)]
    pub unlabeled_count: usize,
    #[arg(long, default_value_t = 30)]
    pub test_count: usize,
    #[arg(long, value_enum, default_value_t = Granularity::Box)]
    pub weight_granularity: Granularity,
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 18)]
    pub pseudo_runs: usize,
    #[arg(long, default_value_t = 18)]
    pub eval_runs: usize,
    /// Model that produces the pseudo-labels.
    #[arg(long, value_enum, default_value_t = TeacherArg::Baseline)]
    pub teacher: TeacherArg,
    /// Arms to run (default: all).
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
}

#[derive(Debug, Clone, clap::Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "target")]
    pub domain: String,
    #[arg(long)]
    pub domain_config: Option<PathBuf>,
    /// Evaluation seeds; each scores its own group of scenes.
    #[arg(long, default_value_t = 100)]
    pub seeds: usize,
    #[arg(long, default_value_t = 8)]
    pub scenes_per_seed: usize,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "1,9,18")]
    pub runs: Vec<usize>,
    /// Single-run box budgets; must be the run counts times --base-boxes.
    /// Pass the flag with no value to skip this column group.
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "300,2700,5400")]
    pub boxes: Vec<usize>,
    #[arg(long, value_delimiter = ',', num_args = 0.., default_value = "1,0.75,0.5")]
    pub f_box_sizes: Vec<f64>,
    #[arg(long, default_value_t = 300)]
    pub base_boxes: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.5)]
    pub iou_thr: f64,
}

/// Exit status for an error: 2 configuration, 3 data, 4 numeric divergence.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::StepOutOfRange { .. } => 2,
        Error::DivergedLoss { .. } | Error::NonFinite(_) => 4,
        Error::InvalidBox(_)
        | Error::EmptyRuns
        | Error::MixedImages { .. }
        | Error::EmptyBatch
        | Error::NoTargets(_)
        | Error::ZeroWeightMass
        | Error::EmptyInput
        | Error::MismatchedImageIds(_)
        | Error::Parse { .. }
        | Error::Integrity(_)
        | Error::UnknownClass(_)
        | Error::Io(_) => 3,
    }
}

/// SHA-256 of the compact JSON of `config` (object keys sorted).
pub fn config_hash(config: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(config.to_string().as_bytes()))
}

pub fn metadata<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<Metadata> {
    let config = serde_json::to_value(config)
        .map_err(|e| Error::Config(format!("unserializable config: {e}")))?;
    Ok(Metadata {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed,
        config_hash: config_hash(&config),
        config,
        extra: Default::default(),
    })
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map_err(|e| Error::Config(format!("cannot serialize output: {e}")))
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, contents)?;
    Ok(path)
}
