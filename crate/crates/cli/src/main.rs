//! `flare`: preprocessing, synthetic data, training, evaluation, gradient
//! checks and the inference service behind one binary.
//!
//! Exit codes: 0 success, 1 runtime or invariant failure, 2 usage error.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use flare_core::data::{MaskMode, SplitMode};
use flare_core::eval::{CritiqueLevel, EvalSplit, IdealDcg};
use flare_core::flare::FusionMode;
use flare_core::train::Ablation;

use config::serde_enum;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invariant check failed: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] flare_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Serve(#[from] flare_serve::ServeError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "flare", version, about = "Hybrid ID + text sequential recommender")]
pub struct Cli {
    /// Directory every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse review and metadata JSON lines into a corpus bundle.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic corpus bundle.
    Synth(SynthArgs),
    /// Train a model.
    ///
    /// Config precedence: built-in defaults < --preset (or the config file's
    /// "preset" field) < --config file < individual flags.
    Train(TrainArgs),
    /// Leave-one-out evaluation at a critique level.
    Eval(EvalArgs),
    /// Evaluation with critiques mutated from level --level down.
    MutateEval(MutateEvalArgs),
    /// Finite-difference gradient check on a toy model.
    GradCheck(GradCheckArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
    /// List the available training presets.
    Presets,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Review JSON lines (reviewerID, asin, unixReviewTime).
    #[arg(long)]
    pub reviews: PathBuf,
    /// Item metadata JSON lines (asin, title, category, ...).
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// trim51 keeps the last 51 events; filter50 drops longer sequences
    /// and untitled items.
    #[arg(long, default_value = "trim51", value_parser = ["trim51", "filter50"])]
    pub policy: String,
    /// Collapse consecutive repeated items.
    #[arg(long)]
    pub dedup: bool,
    /// leave_one_out or unseen_users.
    #[arg(long, default_value = "leave_one_out", value_parser = serde_enum::<SplitMode>)]
    pub split: SplitMode,
    /// Seed for the unseen-users split.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// markov: next item depends on the previous one; category_driven: on its category.
    #[arg(long, default_value = "markov", value_parser = ["markov", "category_driven", "category-driven"])]
    pub structure: String,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shortest user sequence.
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Longest user sequence.
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Category tree branching per level, e.g. 2,3,2,4.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub branching: Option<Vec<usize>>,
    /// Probability the next leaf follows the previous one (category_driven).
    #[arg(long)]
    pub follow_prob: Option<f64>,
    /// Leading category levels consecutive leaves share (category_driven).
    #[arg(long)]
    pub shared_levels: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Corpus bundle from preprocess or synth.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory for the log, checkpoints and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// See `flare presets`.
    #[arg(long)]
    pub preset: Option<String>,
    /// JSON file with any subset of the training config fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Packed examples per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Tokens per packed example.
    #[arg(long)]
    pub token_budget: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// id_only, text_id or text_id_critique.
    #[arg(long, value_parser = serde_enum::<FusionMode>)]
    pub fusion: Option<FusionMode>,
    /// Weight of the masked-item loss; the contrastive loss gets 1 - alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Contrastive margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Drop the contrastive loss.
    #[arg(long)]
    pub no_contrastive: bool,
    /// Fraction of positions masked per sequence.
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// bidirectional or last_only.
    #[arg(long, value_parser = serde_enum::<MaskMode>)]
    pub mask_mode: Option<MaskMode>,
    /// Collapse consecutive repeated items.
    #[arg(long)]
    pub dedup: bool,
    /// Steps between checkpoints; default max(steps / 10, 100).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Precomputed item text embeddings (JSON lines).
    #[arg(long)]
    pub precomputed: Option<PathBuf>,
    /// Applied before the individual flags; repeatable.
    /// no_text, no_perceiver, no_bidirectional_masking, no_contrastive or no_duplicates.
    #[arg(long, value_parser = serde_enum::<Ablation>)]
    pub ablation: Vec<Ablation>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct EvalCommon {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test", value_parser = serde_enum::<EvalSplit>)]
    pub split: EvalSplit,
    /// Report JSON; a manifest is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-query records as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Evaluate only the first N queries.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Recall cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub k: Vec<usize>,
    /// Cutoff for nDCG and Cat-nDCG.
    #[arg(long, default_value_t = 10)]
    pub ndcg_k: usize,
    /// Cat-nDCG ideal: full_relevance or retrieved_list.
    #[arg(long, default_value = "full_relevance", value_parser = serde_enum::<IdealDcg>)]
    pub ideal: IdealDcg,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    /// none, broad (two category levels) or precise (four).
    #[arg(long, default_value = "none", value_parser = serde_enum::<CritiqueLevel>)]
    pub critique: CritiqueLevel,
}

#[derive(Args, Debug)]
pub struct MutateEvalArgs {
    #[command(flatten)]
    pub common: EvalCommon,
    /// First category level replaced (2..=4).
    #[arg(long, value_parser = clap::value_parser!(u8).range(2..=4))]
    pub level: u8,
    /// Seed for choosing mutated categories.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    /// id_only, text_id, text_id_critique, or all.
    #[arg(long, default_value = "all")]
    pub mode: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finite-difference step.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Maximum relative error.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Write the full per-tensor reports as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Allowed UI origin; any origin when omitted.
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(run(std::env::args_os()));
}
