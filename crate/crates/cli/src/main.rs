//! `ver-engine`: generate, train, embed, index, query, evaluate, benchmark and verify.
//!
//! Results go to stdout as one JSON object per line, or as a table with `--format table`.
//! Every failure is a single JSON line on stderr. Exit codes: 0 ok, 1 usage, 2 validation
//! failure, 3 runtime error.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "ver-engine",
    version,
    about = "Knowledge-aware visual entity retrieval engine"
)]
pub struct Cli {
    /// Worker threads for all parallel work [default: available cores]
    #[arg(long, global = true, env = "VER_ENGINE_THREADS")]
    pub threads: Option<usize>,
    /// Seed for every random choice; echoed in all outputs [default: 0, or the config's]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Result format on stdout
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Draw a planted-signal knowledge base: feature store plus train and eval query sets
    GenSynth(GenSynthArgs),
    /// Train the adaptor and write a checkpoint with a JSONL step log
    Train(TrainArgs),
    /// Embed every entity of a store into an index shard
    EmbedKb(EmbedArgs),
    /// Set the search structure of an index shard
    Index(IndexArgs),
    /// Top-k entities for one query vector
    Query(QueryArgs),
    /// Top-1 per split, harmonic mean and recall@K
    Eval(EvalArgs),
    /// Query latency percentiles and throughput
    Bench(BenchArgs),
    /// Compare analytic and finite-difference gradients of the training objective
    Gradcheck(GradcheckArgs),
    /// Check a feature store or index file and report every problem found
    Validate(ValidateArgs),
    /// Train the modality and batching ablations on synthetic data and tabulate them
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Default,
    /// Entity pairs that share visuals and differ only in their text
    Confusable,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// TOML file of generator settings; unset keys keep their defaults
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Starting point for settings the spec file leaves unset
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Output directory; receives store/, train.jsonl, eval.jsonl and spec.toml
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Feature store directory
    #[arg(long)]
    pub store: PathBuf,
    /// Training queries (JSONL)
    #[arg(long)]
    pub queries: PathBuf,
    /// TOML run config with optional `threads`, `precision`, `[adaptor]` and `[train]`
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint path; the manifest, step log and effective config are written beside it
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out queries for periodic evaluation and early stopping
    #[arg(long)]
    pub eval_queries: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Synthetic negatives per sample; 0 trains plain in-batch InfoNCE
    #[arg(long)]
    pub n_sync: Option<usize>,
    /// Pack batches from k-means clusters of the queries
    #[arg(long)]
    pub clustered: Option<bool>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long, value_enum)]
    pub guidance: Option<GuidanceArg>,
    #[arg(long, value_enum)]
    pub precision: Option<config::Precision>,
    /// Evaluate every this many steps (needs --eval-queries)
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Print the effective config as TOML and exit without training
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GuidanceArg {
    Both,
    ImageOnly,
    TextOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImageModeArg {
    /// One row per image
    All,
    /// Primary image only
    Primary,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Index shard to write
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ImageModeArg::All)]
    pub image_mode: ImageModeArg,
    /// Entities per parallel chunk; the partial shard is saved after each chunk
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    /// Continue from the partial shard already at --out
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Exact,
    Ivf,
}

#[derive(Args, Debug)]
pub struct IndexArgs {
    /// Index shard to read
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Inverted lists [default: √rows]
    #[arg(long)]
    pub n_lists: Option<usize>,
    /// Lists probed by default at query time [default: n_lists/8, at least 1]
    #[arg(long)]
    pub n_probe: Option<usize>,
    /// Where to write the result [default: overwrite --index]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    /// Exact scan, or the shard's inverted lists
    #[arg(long, value_enum, default_value_t = ModeArg::Exact)]
    pub mode: ModeArg,
    /// Lists to probe in ivf mode [default: the shard's]
    #[arg(long)]
    pub n_probe: Option<usize>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// A file holding a JSON array or comma/space separated numbers, or such a list inline
    #[arg(long)]
    pub query_vec: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Query set (JSONL)
    #[arg(long)]
    pub queries: PathBuf,
    /// Recall cut-offs
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20])]
    pub ks: Vec<usize>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Passes over the query set
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Also measure throughput at each of these thread counts
    #[arg(long, value_delimiter = ',')]
    pub scaling: Vec<usize>,
    #[command(flatten)]
    pub search: SearchArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DimsArg {
    /// B=3, D=8, D_t=12, 2 patches, 4 tokens, 1 head, 2 layers
    Small,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = DimsArg::Small)]
    pub dims: DimsArg,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct ValidateArgs {
    /// Feature store directory or its .wcft file
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Index shard
    #[arg(long)]
    pub index: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value_t = Preset::Confusable)]
    pub preset: Preset,
    /// TOML file of generator settings over the preset; its seed is replaced per run
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Knowledge-base seeds; one row per config and seed
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
    /// TOML run config; `[train]` is the base every config starts from
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Only the four cluster × synthetic rows, without the modality rows
    #[arg(long)]
    pub grid_only: bool,
    /// Also write the rows as CSV here
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// A failure with a chosen exit code, for problems detected by the binary itself.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            kind: "validation",
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return (f.code, f.kind);
        }
        if let Some(core) = cause.downcast_ref::<ver_core::Error>() {
            return if core.is_validation() {
                (EXIT_VALIDATION, "validation")
            } else {
                (EXIT_RUNTIME, "runtime")
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return (EXIT_VALIDATION, "validation");
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return (EXIT_VALIDATION, "validation");
            }
        }
    }
    (EXIT_RUNTIME, "runtime")
}

fn report(code: u8, kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return report(EXIT_USAGE, "usage", e.render().to_string().trim());
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            report(code, kind, &format!("{e:#}"))
        }
    }
}
