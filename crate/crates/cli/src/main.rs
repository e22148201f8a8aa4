//! `unidex`: train heads, build and inspect indexes, search, evaluate, run
//! ablations and serve a frozen index over HTTP.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage or configuration error.

mod commands;
mod service;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use unidex_core::matcher::MatchStrategy;

#[derive(Parser)]
#[command(name = "unidex", version, about = "Model-based semantic inverted index")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a touch (quantizer) or rank head from graded JSONL instances.
    Train(TrainArgs),
    /// Encode a corpus into semantic IDs and write an index.
    BuildIndex(BuildIndexArgs),
    /// Print index size statistics as JSON.
    IndexStats(IndexStatsArgs),
    /// Run one query through retrieval and ranking.
    Search(SearchArgs),
    /// Recall@K / MRR@K over a labeled test file, as CSV.
    Evaluate(EvaluateArgs),
    /// Train/index/evaluate sweeps on the synthetic benchmark, as CSV.
    Ablate(AblateArgs),
    /// HTTP search service over a frozen index.
    Serve(ServeArgs),
    /// Write a corpus's token embeddings to a UDXE file.
    ExportEmbeddings(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Touch,
    Rank,
}

#[derive(Args)]
struct EncoderArgs {
    /// Hashed feature width.
    #[arg(long, default_value_t = 256)]
    d_base: usize,
    /// Seed of the feature hash.
    #[arg(long, default_value_t = 0)]
    hash_seed: u64,
}

#[derive(Args)]
struct QuantArgs {
    /// Token embedding width d.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Code dimensions per SID.
    #[arg(long, default_value_t = 19)]
    dq: usize,
    /// Levels per code dimension.
    #[arg(long, default_value_t = 2)]
    k: u32,
    #[arg(long, default_value_t = 1e-3)]
    ewgs_delta: f64,
    /// SIDs per query (M).
    #[arg(long, default_value_t = 3)]
    query_sids: usize,
    /// SIDs per document (N).
    #[arg(long, default_value_t = 8)]
    doc_sids: usize,
}

#[derive(Args)]
struct RankShapeArgs {
    #[arg(long, default_value_t = 32)]
    rank_dim: usize,
    #[arg(long, default_value_t = 4)]
    rank_tokens: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Peak learning rate (defaults: 3e-2 touch, 5e-3 rank).
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, default_value_t = 50)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_match: f64,
    #[arg(long, default_value_t = 0.1)]
    lambda_reg: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda_distill: f64,
    #[arg(long, default_value_t = MatchStrategy::MaxMax)]
    match_strategy: MatchStrategy,
    /// Only lower-graded candidates act as negatives.
    #[arg(long)]
    no_in_batch_negatives: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-step loss history here.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    quant: QuantArgs,
    #[command(flatten)]
    rank: RankShapeArgs,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["corpus", "embeddings"])))]
struct BuildIndexArgs {
    /// Corpus JSONL ({"id", "text"} per line).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Precomputed document-role embeddings (UDXE) instead of a corpus.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Touch head checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rank head; also writes document rank embeddings next to the index.
    #[arg(long, requires = "corpus")]
    rank: Option<PathBuf>,
    /// Where the rank embeddings go (default: `<out>.rank.udxe`).
    #[arg(long, requires = "rank")]
    rank_out: Option<PathBuf>,
}

#[derive(Args)]
struct IndexStatsArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query JSONL ({"id", "text"}) used for the average retrieved count.
    #[arg(long, requires = "checkpoint")]
    query_log: Option<PathBuf>,
    /// Touch head that built the index; required with --query-log.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    touch: PathBuf,
    #[arg(long)]
    rank: PathBuf,
    /// Document rank embeddings (default: `<index>.rank.udxe`).
    #[arg(long)]
    rank_embeddings: Option<PathBuf>,
    /// Keep at most this many candidates (lowest ordinals) before ranking.
    #[arg(long)]
    max_candidates: Option<usize>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    /// Print the response as JSON instead of `id<TAB>score` lines.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Test JSONL ({"query": {"id", "text"}, "relevant_ids": [...]}).
    #[arg(long)]
    test: PathBuf,
    /// Metric cutoffs.
    #[arg(long, value_delimiter = ',', default_value = "10,300")]
    k: Vec<usize>,
    /// CSV report path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also dump every ranked list as JSONL.
    #[arg(long)]
    rankings: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// match-strategy | dq-sweep | sid-count-query | sid-count-doc | loss-removal
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 2000)]
    rank_steps: usize,
    #[arg(long, default_value_t = 50)]
    clusters: usize,
    #[arg(long, default_value_t = 10)]
    topics_per_cluster: usize,
    #[arg(long, default_value_t = 10)]
    docs_per_topic: usize,
    #[arg(long, value_delimiter = ',', default_value = "10,300")]
    k: Vec<usize>,
    #[arg(long)]
    max_candidates: Option<usize>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "UNIDEX_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "UNIDEX_INDEX")]
    index: PathBuf,
    #[arg(long, env = "UNIDEX_TOUCH_CKPT")]
    touch: PathBuf,
    #[arg(long, env = "UNIDEX_RANK_CKPT")]
    rank: PathBuf,
    #[arg(long)]
    rank_embeddings: Option<PathBuf>,
    /// Used when a request omits top_k.
    #[arg(long, default_value_t = 10)]
    top_k: usize,
    #[arg(long, default_value_t = 64)]
    max_concurrent: usize,
    #[arg(long)]
    max_candidates: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportRole {
    Query,
    Document,
    RankQuery,
    RankDocument,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Touch checkpoint for query/document, rank checkpoint for rank-*.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "document")]
    role: ExportRole,
    #[arg(long)]
    out: PathBuf,
}

/// Errors in how the tool was invoked rather than in what it processed.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.downcast_ref::<UsageError>().is_some()
        || matches!(
            err.downcast_ref::<unidex_core::Error>(),
            Some(unidex_core::Error::Config(_))
        );
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::BuildIndex(a) => commands::build_index_cmd(a),
        Command::IndexStats(a) => commands::index_stats(a),
        Command::Search(a) => commands::search(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Serve(a) => service::serve(a),
        Command::ExportEmbeddings(a) => commands::export_embeddings(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
