use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "diffsim", version, about = "Attention-alignment image similarity and its benchmarks")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Attention {
    #[value(name = "self")]
    SelfAttn,
    Cross,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Backend id (sd15, sdxl, clip-vit, dinov2, toy-self, toy-cross).
    #[arg(long, global = true)]
    pub backend: Option<String>,

    /// Self- or cross-attention (cross feeds image tokens to a U-Net).
    #[arg(long, global = true, value_enum)]
    pub attention: Option<Attention>,

    /// Block name such as up_0, mid, down_1 or layer_7.
    #[arg(long, global = true)]
    pub block: Option<String>,

    /// Attention layer ordinal within the block.
    #[arg(long, global = true)]
    pub layer: Option<u32>,

    #[arg(long, global = true)]
    pub timestep: Option<u32>,

    #[arg(long, global = true)]
    pub resolution: Option<u32>,

    /// Noise seed, or the triplet seed for `triplets build`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Draw independent noise for each image instead of sharing it.
    #[arg(long, global = true)]
    pub independent_noise: bool,

    /// Crop images to their salient subject before encoding.
    #[arg(long, global = true)]
    pub crop_subject: bool,

    /// Cosine reduction: per_token_mean or flattened.
    #[arg(long, global = true)]
    pub cosine_mode: Option<String>,

    /// A MetricConfig JSON file; replaces the metric flags above.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Feature cache root (default: $DIFFSIM_CACHE_DIR, else no cache).
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,

    /// Checkpoint root (default: $DIFFSIM_WEIGHTS_DIR).
    #[arg(long, global = true)]
    pub weights_dir: Option<PathBuf>,

    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Report formats: json, csv, md, plot.
    #[arg(long, global = true, value_delimiter = ',')]
    pub format: Vec<String>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Similarity of two images.
    Compare { a: PathBuf, b: PathBuf },

    /// 2AFC accuracy of one configuration, or of a majority-vote ensemble.
    Eval(EvalArgs),

    /// Accuracy of every published site and timestep, reporting the best.
    Gridsearch(GridArgs),

    /// Triplet construction.
    #[command(subcommand)]
    Triplets(TripletsCommand),

    /// Nearest neighbours of a query image in a corpus.
    Retrieve(RetrieveArgs),

    /// Frame-to-first-frame similarity variance per video.
    VideoVar(VideoArgs),

    /// Feature cache maintenance.
    #[command(subcommand)]
    Cache(CacheCommand),

    /// Checkpoint presence.
    #[command(subcommand)]
    Weights(WeightsCommand),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub triplets: PathBuf,

    /// Manifest mapping image ids to files; without it ids are paths
    /// relative to the triplets file.
    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Choice files (jsonl of {"id", "choice"}) to combine by majority vote
    /// instead of scoring.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub triplets: PathBuf,

    #[arg(long)]
    pub manifest: Option<PathBuf>,

    /// Resolutions to sweep (default: --resolution or the backend default).
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Vec<u32>,
}

#[derive(Debug, Subcommand)]
pub enum TripletsCommand {
    /// Builds a benchmark's triplets from its manifest.
    Build {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub query: PathBuf,

    #[arg(long)]
    pub corpus_manifest: PathBuf,

    #[arg(long, default_value_t = diffsim_eval::DEFAULT_K)]
    pub k: usize,

    /// Skip corpus entries that are the query itself.
    #[arg(long)]
    pub exclude_query: bool,

    /// Writes the query and its neighbours side by side to this image.
    #[arg(long)]
    pub contact_sheet: Option<PathBuf>,

    #[arg(long, default_value_t = 160)]
    pub thumb: u32,
}

#[derive(Debug, Args)]
pub struct VideoArgs {
    #[arg(long)]
    pub manifest: PathBuf,

    /// Only this video (default: all).
    #[arg(long)]
    pub video: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Evicts least recently used entries down to a size budget.
    Gc {
        /// Budget in bytes; K, M and G suffixes are powers of 1024.
        #[arg(long)]
        budget: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum WeightsCommand {
    /// Lists expected and missing checkpoint files; fails if any is missing.
    Check,
}
