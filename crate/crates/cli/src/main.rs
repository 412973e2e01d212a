use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ralab::evalkit::DebiasMode;
use ralab::index::Precision;
use ralab::losses::LossKind;
use ralab::trainer::{IndexMode, PretextTask};
use serde::Serialize;

mod commands;
mod manifest;

/// Retrieval-augmented LM laboratory: corpus chunking, dense indices,
/// retriever training and evaluation.
#[derive(Debug, Parser)]
#[command(name = "ralab", version)]
struct Cli {
    /// Worker threads for every parallel section (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter and chunk raw documents into passages.
    Ingest(IngestArgs),
    /// Embed a passage file into an exact index.
    BuildIndex(BuildIndexArgs),
    /// Product-quantize an exact index.
    CompressIndex(CompressArgs),
    /// Query an index.
    Search(SearchArgs),
    /// Train the retriever against the reader.
    Train(TrainArgs),
    /// Score choice or QA tasks with retrieval.
    Evaluate(EvaluateArgs),
    /// Cross two dated indices with year-specific answers.
    SwapIndex(SwapArgs),
    /// Print the index-refresh overheads.
    CostModel(CostArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Raw documents, one JSON object per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Passage file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub max_words: usize,
    /// TOML thresholds for the quality filter; no filtering when absent.
    #[arg(long)]
    pub filter_config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildIndexArgs {
    /// Passage file from `ingest`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Retriever checkpoint. When absent a fresh encoder is initialized and
    /// saved as `<out>.encoder`.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long)]
    pub projection: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    /// float32 or float16.
    #[arg(long, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Overrides the dump date read from the passages (YYYY-MM-DD).
    #[arg(long)]
    pub dump_date: Option<chrono::NaiveDate>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Subspaces per vector.
    #[arg(long)]
    pub m: usize,
    /// Centroids per subspace.
    #[arg(long)]
    pub kc: usize,
    #[arg(long, default_value_t = ralab::index::DEFAULT_KMEANS_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Query text; repeat for several queries.
    #[arg(long = "query", required = true)]
    pub queries: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Passage file, to print passage text alongside ids.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

/// Every flag overrides the matching key of `--config`.
#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Flat TOML file of training keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Run directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Supervised examples (JSON lines). Pretext examples are generated from
    /// the corpus when absent.
    #[arg(long)]
    pub examples: Option<PathBuf>,
    /// Fixed per-document reader scores (JSON lines) instead of the overlap reader.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Initial retriever checkpoint.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub rerank_pool: Option<usize>,
    #[arg(long)]
    pub refresh_interval: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub target_temperature: Option<f64>,
    /// adist, pdist, loop or emdr2.
    #[arg(long)]
    pub loss: Option<LossKind>,
    /// fixed, query_side, rerank or full_refresh.
    #[arg(long)]
    pub mode: Option<IndexMode>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// prefix_lm or mlm.
    #[arg(long)]
    pub task: Option<PretextTask>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub shards: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Choice tasks {question, options, gold} and/or QA tasks {question, answers}.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Passages the index was built from.
    #[arg(long)]
    pub corpus: PathBuf,
    /// standard, cyclic4 or all24.
    #[arg(long, default_value_t = DebiasMode::Standard)]
    pub mode: DebiasMode,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Flag retrieved passages that contain most of the question, and
    /// re-score without them.
    #[arg(long)]
    pub audit_leakage: bool,
    /// Smoothing weight of the overlap reader.
    #[arg(long, default_value_t = ralab::lm::DEFAULT_LAMBDA)]
    pub lambda: f64,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SwapArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub to: PathBuf,
    /// Temporal tasks {query, answers_by_year}.
    #[arg(long)]
    pub task: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Passages behind both indices; repeat for several files.
    #[arg(long = "corpus", required = true)]
    pub corpora: Vec<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CostArgs {
    /// Passages in the index.
    #[arg(long)]
    pub n: u128,
    /// Batch size.
    #[arg(long)]
    pub b: u128,
    /// Retrieved documents per example.
    #[arg(long)]
    pub k: u128,
    /// Steps between full refreshes.
    #[arg(long)]
    pub r: u128,
    /// Re-rank pool size; the re-rank overhead is printed when given.
    #[arg(long)]
    pub l: Option<u128>,
    /// Retriever parameter count (with --plm).
    #[arg(long, requires = "plm", conflicts_with = "ratio")]
    pub pretr: Option<u128>,
    /// Reader parameter count (with --pretr).
    #[arg(long, requires = "pretr")]
    pub plm: Option<u128>,
    /// Retriever/reader parameter ratio as a decimal, e.g. 0.04.
    #[arg(long, required_unless_present = "pretr")]
    pub ratio: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: invalid `threads`: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::CompressIndex(a) => commands::compress_index(a),
        Command::Search(a) => commands::search(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::SwapIndex(a) => commands::swap_index(a),
        Command::CostModel(a) => commands::cost_model(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
