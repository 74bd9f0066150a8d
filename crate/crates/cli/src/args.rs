use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "abltx",
    version,
    about = "Channel-level ability transfer between sibling checkpoints"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    /// error, warn, info, debug or trace
    #[arg(long, global = true, env = "ABLTX_LOG_LEVEL", default_value = "info")]
    pub log_level: log::LevelFilter,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "ABLTX_WORKERS")]
    pub workers: Option<usize>,

    /// Upper bound on bytes read per streamed chunk.
    #[arg(long, global = true, env = "ABLTX_CHUNK_BYTES", default_value_t = 4 << 20)]
    pub chunk_bytes: usize,

    /// JSON file of defaults; keys mirror flag names, with per-subcommand
    /// sections. Flags and ABLTX_* variables take precedence.
    #[arg(long, global = true, env = "ABLTX_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "lowercase")]
pub enum Command {
    /// Write a seeded synthetic checkpoint.
    Synth(SynthArgs),
    /// Copy a checkpoint with noise planted on chosen channel slices.
    Perturb(PerturbArgs),
    /// Record every module's outputs on a token sequence.
    Forward(ForwardArgs),
    /// Reduce two aligned dumps to per-channel absolute-difference sums.
    Diff(DiffArgs),
    /// Token-averaged activation differences from a diff file.
    Stats(StatsArgs),
    /// Per-channel L2 norm of the task vector between two checkpoints.
    Weightdiff(WeightdiffArgs),
    /// Complementary CDF of a statistics file as CSV.
    Ccdf(CcdfArgs),
    /// Top-p% channels of a statistics file.
    Mask(MaskArgs),
    /// Union of ability masks from one source model.
    Union(UnionArgs),
    /// Pairwise overlap table of masks.
    Overlap(OverlapArgs),
    /// Masked task-vector transfer or a baseline merge.
    Merge(MergeArgs),
    /// Fraction of planted channels recovered by a mask.
    Recovery(RecoveryArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, env = "ABLTX_N_LAYERS", default_value_t = 2)]
    pub n_layers: usize,
    #[arg(long, env = "ABLTX_HIDDEN_DIM", default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, env = "ABLTX_INTERMEDIATE_DIM", default_value_t = 128)]
    pub intermediate_dim: usize,
    #[arg(long, env = "ABLTX_VOCAB_SIZE", default_value_t = 256)]
    pub vocab_size: usize,
    #[arg(long, env = "ABLTX_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Causal softmax attention instead of the per-token gate.
    #[arg(long, env = "ABLTX_TOKEN_MIXING")]
    pub token_mixing: bool,
    #[arg(long, env = "ABLTX_QKV_BIAS")]
    pub qkv_bias: bool,
    /// Read the spec from a JSON file instead of the flags above.
    #[arg(long, env = "ABLTX_SPEC")]
    pub spec: Option<PathBuf>,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[arg(long, env = "ABLTX_BASE")]
    pub base: PathBuf,
    /// Channel to plant, as `module.path[index]`; repeatable.
    #[arg(long = "channel")]
    pub channels: Vec<String>,
    /// Additionally plant this many channels drawn with --seed.
    #[arg(long, env = "ABLTX_RANDOM_COUNT", default_value_t = 0)]
    pub random_count: usize,
    /// Module path suffixes excluded from random planting; repeatable.
    #[arg(long = "exclude")]
    pub exclude: Vec<String>,
    /// L2 norm of the noise added to each planted slice.
    #[arg(long, env = "ABLTX_DELTA_SCALE", default_value_t = 0.3)]
    pub delta_scale: f64,
    #[arg(long, env = "ABLTX_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "ABLTX_MODEL_ID")]
    pub model_id: Option<String>,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ForwardArgs {
    #[arg(long, env = "ABLTX_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// JSON file `{"tokens": [...], "roles": "PPAA..."}`; roles default to
    /// all answer tokens.
    #[arg(long, env = "ABLTX_TOKENS", conflicts_with = "random_tokens")]
    pub tokens: Option<PathBuf>,
    /// Use this many seeded random tokens instead of --tokens.
    #[arg(long, env = "ABLTX_RANDOM_TOKENS")]
    pub random_tokens: Option<usize>,
    #[arg(long, env = "ABLTX_TOKEN_SEED", default_value_t = 0)]
    pub token_seed: u64,
    /// With --random-tokens, mark this many leading tokens as prompt.
    #[arg(long, env = "ABLTX_PROMPT_TOKENS", default_value_t = 0)]
    pub prompt_tokens: usize,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Roles {
    Answer,
    All,
    Prompt,
}

#[derive(Debug, Args, Serialize)]
pub struct DiffArgs {
    #[arg(long, env = "ABLTX_DUMP_A")]
    pub dump_a: PathBuf,
    #[arg(long, env = "ABLTX_DUMP_B")]
    pub dump_b: PathBuf,
    #[arg(long, env = "ABLTX_ROLES", value_enum, default_value = "answer")]
    pub roles: Roles,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long, env = "ABLTX_DIFF")]
    pub diff: PathBuf,
    #[arg(long, env = "ABLTX_ABILITY_TAG")]
    pub ability_tag: String,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct WeightdiffArgs {
    #[arg(long, env = "ABLTX_TARGET")]
    pub target: PathBuf,
    #[arg(long, env = "ABLTX_ABILITY")]
    pub ability: PathBuf,
    #[arg(long, env = "ABLTX_ABILITY_TAG")]
    pub ability_tag: String,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Global,
    Layer,
    ModuleType,
}

#[derive(Debug, Args, Serialize)]
pub struct CcdfArgs {
    #[arg(long, env = "ABLTX_STATS")]
    pub stats: PathBuf,
    #[arg(long, env = "ABLTX_GROUP", value_enum, default_value = "global")]
    pub group: Group,
    /// Comma-separated thresholds; default is a log-spaced grid.
    #[arg(long, env = "ABLTX_THRESHOLDS", value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Grid size when no thresholds are given.
    #[arg(long, env = "ABLTX_POINTS", default_value_t = 64)]
    pub points: usize,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MaskArgs {
    #[arg(long, env = "ABLTX_STATS")]
    pub stats: PathBuf,
    /// Selection ratio in percent of all channels.
    #[arg(long, env = "ABLTX_P", default_value_t = 1.0)]
    pub p: f64,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct UnionArgs {
    /// Ability mask file; repeatable.
    #[arg(long = "mask", required = true)]
    pub masks: Vec<PathBuf>,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct OverlapArgs {
    /// Mask file; repeatable, at least two unless comparing one with
    /// itself.
    #[arg(long = "mask", required = true)]
    pub masks: Vec<PathBuf>,
    /// Row/column labels in mask order; defaults to each mask's tag.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// CSV with one row per ordered pair.
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
    /// Also write the matrix as a text table.
    #[arg(long, env = "ABLTX_TABLE")]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodArg {
    Act,
    Ta,
    Ties,
    Dare,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long, env = "ABLTX_TARGET")]
    pub target: PathBuf,
    /// `<checkpoint>:<mask file|full>[:<lambda>]`; repeatable.
    #[arg(long = "source", required = true)]
    pub sources: Vec<String>,
    #[arg(long, env = "ABLTX_METHOD", value_enum, default_value = "act")]
    pub method: MethodArg,
    /// Scale for sources that do not give their own.
    #[arg(long, env = "ABLTX_LAMBDA", default_value_t = 0.4)]
    pub lambda: f64,
    /// TIES: fraction of elements kept per tensor.
    #[arg(long, env = "ABLTX_TRIM_FRACTION", default_value_t = 0.2)]
    pub trim_fraction: f64,
    /// DARE: drop probability.
    #[arg(long, env = "ABLTX_DROP_PROB", default_value_t = 0.9)]
    pub drop_prob: f64,
    #[arg(long, env = "ABLTX_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RecoveryArgs {
    #[arg(long, env = "ABLTX_MASK")]
    pub mask: PathBuf,
    /// Planted-channel list written by `perturb`.
    #[arg(long, env = "ABLTX_PLANTED")]
    pub planted: PathBuf,
    /// Only count planted channels with a nonzero statistic here.
    #[arg(long, env = "ABLTX_STATS")]
    pub stats: Option<PathBuf>,
    #[arg(long, env = "ABLTX_OUT")]
    pub out: Option<PathBuf>,
}
