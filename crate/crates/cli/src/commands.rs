use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use unidex_core::ablation::{rows_to_csv, run_ablation, AblationAxis, AblationBase, AblationSpec};
use unidex_core::checkpoint::{self, Checkpoint};
use unidex_core::eval::{load_test_queries, rank_queries, report_from_rankings, EvalQuery, EvalReport};
use unidex_core::index::{build_index, load_index, save_index, Fingerprint};
use unidex_core::ingest::{
    hash_features, load_corpus, load_embeddings, save_embeddings, toy_encode, BaseFeature, DocumentRecord,
    EmbeddingTable, EncoderHead, Role,
};
use unidex_core::pipeline::{document_sids, rank_embeddings, QueryInput, SearchEngine, SearchOutcome};
use unidex_core::quantizer::{multivector_sids, QuantizerConfig, QuantizerHead, TouchShape};
use unidex_core::rank::{RankHead, RankShape};
use unidex_core::synthetic::BenchmarkConfig;
use unidex_core::trainer::{load_training, train as run_training, LossConfig, TrainConfig};

use crate::{
    AblateArgs, BuildIndexArgs, EngineArgs, EvaluateArgs, ExportArgs, ExportRole, IndexStatsArgs, Mode, SearchArgs,
    TrainArgs, UsageError,
};

/// `<index>.rank.udxe`: where build-index puts document rank vectors by default.
pub(crate) fn rank_sidecar(index: &Path) -> PathBuf {
    let mut s = OsString::from(index.as_os_str());
    s.push(".rank.udxe");
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Loads both heads, checks the index against the touch head and attaches rank vectors.
pub(crate) fn load_engine(
    index_path: &Path,
    touch: &Path,
    rank: &Path,
    rank_embeddings: Option<&Path>,
    max_candidates: Option<usize>,
) -> Result<SearchEngine> {
    let touch = checkpoint::load_touch(touch).with_context(|| format!("loading {}", touch.display()))?;
    let rank = checkpoint::load_rank(rank).with_context(|| format!("loading {}", rank.display()))?;
    let index = load_index(index_path, Some(&checkpoint::head_checksum(&touch)))
        .with_context(|| format!("loading {}", index_path.display()))?;
    let table_path = rank_embeddings.map_or_else(|| rank_sidecar(index_path), Path::to_path_buf);
    let table = load_embeddings(&table_path, Role::RankDocument)
        .with_context(|| format!("loading rank embeddings {}", table_path.display()))?;
    Ok(SearchEngine::new(index, touch, rank, &table)?.with_max_candidates(max_candidates))
}

fn engine(args: &EngineArgs) -> Result<SearchEngine> {
    load_engine(
        &args.index,
        &args.touch,
        &args.rank,
        args.rank_embeddings.as_deref(),
        args.max_candidates,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub(crate) struct Hit {
    pub id: String,
    pub score: f64,
}

/// Search result as both the CLI (`--json`) and the service print it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub(crate) struct SearchResponse {
    pub hits: Vec<Hit>,
    pub touched: usize,
    pub truncated: bool,
}

impl From<SearchOutcome> for SearchResponse {
    fn from(out: SearchOutcome) -> Self {
        SearchResponse {
            hits: out
                .hits
                .into_iter()
                .map(|h| Hit {
                    id: h.doc_id,
                    score: h.score,
                })
                .collect(),
            touched: out.touched,
            truncated: out.truncated,
        }
    }
}

fn features(docs: &[DocumentRecord], d_base: usize, seed: u64) -> Result<Vec<(String, BaseFeature)>> {
    docs.iter()
        .map(|d| Ok((d.id.clone(), hash_features(&d.text, d_base, seed)?)))
        .collect()
}

pub(crate) fn train(a: TrainArgs) -> Result<()> {
    let loss = LossConfig {
        tau: a.tau,
        lambda_match: a.lambda_match,
        lambda_reg: a.lambda_reg,
        lambda_distill: a.lambda_distill,
        in_batch_negatives: !a.no_in_batch_negatives,
        match_strategy: a.match_strategy,
    };
    loss.validate()?;
    let base = match a.mode {
        Mode::Touch => TrainConfig::default(),
        Mode::Rank => TrainConfig::rank_default(),
    };
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate.unwrap_or(base.learning_rate),
        warmup_steps: a.warmup_steps,
        seed: a.seed,
    };
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(UsageError("batch size and learning rate must be positive".into()).into());
    }
    let quant = QuantizerConfig {
        dim: a.quant.dim,
        code_dim: a.quant.dq,
        levels: a.quant.k,
        ewgs_delta: a.quant.ewgs_delta,
    };
    if a.encoder.d_base < 8 {
        return Err(UsageError(format!("--d-base must be >= 8, got {}", a.encoder.d_base)).into());
    }
    // Heads are built before any data is read so that bad shapes fail fast.
    enum Head {
        Touch(QuantizerHead),
        Rank(RankHead),
    }
    let head = match a.mode {
        Mode::Touch => {
            quant.validate()?;
            let shape = TouchShape {
                d_base: a.encoder.d_base,
                query_tokens: a.quant.query_sids,
                doc_tokens: a.quant.doc_sids,
                hash_seed: a.encoder.hash_seed,
            };
            Head::Touch(QuantizerHead::new(quant, shape, a.seed)?)
        }
        Mode::Rank => {
            let shape = RankShape {
                d_base: a.encoder.d_base,
                dim: a.rank.rank_dim,
                tokens: a.rank.rank_tokens,
                hash_seed: a.encoder.hash_seed,
            };
            Head::Rank(RankHead::new(shape, a.seed)?)
        }
    };

    let raw = load_training(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let instances = raw
        .iter()
        .map(|i| i.featurize(a.encoder.d_base, a.encoder.hash_seed))
        .collect::<unidex_core::Result<Vec<_>>>()?;
    let start = Instant::now();
    let history = match head {
        Head::Touch(h) => {
            let (h, history) = run_training(&instances, h, &cfg, &loss)?;
            checkpoint::save_touch(&h, &a.out)?;
            history
        }
        Head::Rank(h) => {
            let (h, history) = run_training(&instances, h, &cfg, &loss)?;
            checkpoint::save_rank(&h, &a.out)?;
            history
        }
    };
    if let Some(path) = &a.loss_csv {
        write_text(path, &history.to_csv())?;
    }
    let last = history.totals().last().copied().unwrap_or(f64::NAN);
    eprintln!(
        "trained {} steps on {} instances in {:.1}s, final loss {last:.4}, wrote {}",
        cfg.steps,
        instances.len(),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    Ok(())
}

pub(crate) fn build_index_cmd(a: BuildIndexArgs) -> Result<()> {
    let touch = checkpoint::load_touch(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let corpus = a.corpus.as_deref().map(load_corpus).transpose()?;
    let sids = match (&corpus, &a.embeddings) {
        (Some(docs), _) => {
            let feats = features(docs, touch.encoder.d_base(), touch.hash_seed)?;
            document_sids(feats.iter().map(|(id, f)| (id.as_str(), f)), &touch)?
        }
        (None, Some(path)) => {
            let table = load_embeddings(path, Role::Document)?;
            table
                .iter()
                .map(|(id, mv)| Ok((id.to_string(), multivector_sids(mv, &touch)?)))
                .collect::<unidex_core::Result<Vec<_>>>()?
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    let index = build_index(&sids, Fingerprint::of_head(&touch))?;
    save_index(&index, &a.out)?;
    let stats = index.stats(None)?;
    eprintln!(
        "indexed {} docs, {} distinct SIDs, wrote {}",
        stats.num_docs,
        stats.num_distinct_sids,
        a.out.display()
    );
    if let (Some(rank_path), Some(docs)) = (&a.rank, &corpus) {
        let rank = checkpoint::load_rank(rank_path).with_context(|| format!("loading {}", rank_path.display()))?;
        let feats = features(docs, rank.encoder.d_base(), rank.hash_seed)?;
        let table = rank_embeddings(feats.iter().map(|(id, f)| (id.as_str(), f)), &rank)?;
        let out = a.rank_out.clone().unwrap_or_else(|| rank_sidecar(&a.out));
        save_embeddings(&table, &out)?;
        eprintln!("wrote rank embeddings {}", out.display());
    }
    Ok(())
}

pub(crate) fn index_stats(a: IndexStatsArgs) -> Result<()> {
    let index = load_index(&a.index, None).with_context(|| format!("loading {}", a.index.display()))?;
    let log = match (&a.query_log, &a.checkpoint) {
        (Some(log_path), Some(ckpt)) => {
            let touch = checkpoint::load_touch(ckpt)?;
            if index.fingerprint().head_checksum != checkpoint::head_checksum(&touch) {
                return Err(unidex_core::Error::FingerprintMismatch.into());
            }
            let queries = load_corpus(log_path)?;
            let sids = queries
                .iter()
                .map(|q| {
                    let f = hash_features(&q.text, touch.encoder.d_base(), touch.hash_seed)?;
                    multivector_sids(&toy_encode(&f, &touch, Role::Query)?, &touch)
                })
                .collect::<unidex_core::Result<Vec<_>>>()?;
            Some(sids)
        }
        _ => None,
    };
    let stats = index.stats(log.as_deref())?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

pub(crate) fn search(a: SearchArgs) -> Result<()> {
    let engine = engine(&a.engine)?;
    let out = engine.search(&QueryInput::Text(a.query), a.top_k)?;
    let resp = SearchResponse::from(out);
    if a.json {
        println!("{}", serde_json::to_string(&resp)?);
    } else {
        for h in &resp.hits {
            println!("{}\t{}", h.id, h.score);
        }
    }
    Ok(())
}

/// `query_count,avg_retrieved,recall@K…,mrr@K…` with one data row.
pub(crate) fn report_csv(report: &EvalReport) -> String {
    let mut head = String::from("query_count,avg_retrieved");
    let mut row = format!("{},{}", report.query_count, report.avg_retrieved);
    for (k, v) in &report.recall_at_k {
        let _ = write!(head, ",recall@{k}");
        let _ = write!(row, ",{v}");
    }
    for (k, v) in &report.mrr_at_k {
        let _ = write!(head, ",mrr@{k}");
        let _ = write!(row, ",{v}");
    }
    format!("{head}\n{row}\n")
}

pub(crate) fn evaluate(a: EvaluateArgs) -> Result<()> {
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(UsageError("--k needs positive cutoffs".into()).into());
    }
    let engine = engine(&a.engine)?;
    let tests = load_test_queries(&a.test).with_context(|| format!("reading {}", a.test.display()))?;
    if tests.is_empty() {
        return Err(unidex_core::Error::Empty("test set").into());
    }
    let queries: Vec<EvalQuery> = tests.iter().map(EvalQuery::from).collect();
    let top_k = a.k.iter().copied().max().unwrap_or(1);
    let rankings = rank_queries(&queries, &engine, top_k)?;
    if let Some(path) = &a.rankings {
        let mut dump = String::new();
        for r in &rankings {
            dump.push_str(&serde_json::to_string(r)?);
            dump.push('\n');
        }
        write_text(path, &dump)?;
    }
    let csv = report_csv(&report_from_rankings(&rankings, &a.k)?);
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub(crate) fn ablate(a: AblateArgs) -> Result<()> {
    let axis: AblationAxis = a.axis.parse()?;
    let mut base = AblationBase::default();
    base.benchmark = BenchmarkConfig {
        clusters: a.clusters,
        topics_per_cluster: a.topics_per_cluster,
        docs_per_topic: a.docs_per_topic,
        ..base.benchmark
    };
    base.benchmark.validate()?;
    base.touch_train.steps = a.steps;
    base.rank_train.steps = a.rank_steps;
    base.ks = a.k;
    base.max_candidates = a.max_candidates;
    let spec = AblationSpec {
        axis,
        values: a.values,
        seeds: a.seeds,
    };
    let rows = run_ablation(&spec, &base)?;
    write_text(&a.out, &rows_to_csv(&rows))?;
    eprintln!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn encode_table<H: EncoderHead>(
    docs: &[DocumentRecord],
    head: &H,
    d_base: usize,
    seed: u64,
    role: Role,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for d in docs {
        let f = hash_features(&d.text, d_base, seed)?;
        table.insert(d.id.clone(), toy_encode(&f, head, role)?)?;
    }
    Ok(table)
}

pub(crate) fn export_embeddings(a: ExportArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let docs = load_corpus(&a.corpus)?;
    let table = match (ckpt, a.role) {
        (Checkpoint::Touch(h), ExportRole::Query | ExportRole::Document) => {
            let role = if matches!(a.role, ExportRole::Query) { Role::Query } else { Role::Document };
            encode_table(&docs, &h, h.encoder.d_base(), h.hash_seed, role)?
        }
        (Checkpoint::Rank(h), ExportRole::RankQuery | ExportRole::RankDocument) => {
            let role = if matches!(a.role, ExportRole::RankQuery) {
                Role::RankQuery
            } else {
                Role::RankDocument
            };
            encode_table(&docs, &h, h.encoder.d_base(), h.hash_seed, role)?
        }
        _ => {
            return Err(UsageError(
                "query/document roles need a touch checkpoint, rank-* roles a rank checkpoint".into(),
            )
            .into())
        }
    };
    save_embeddings(&table, &a.out)?;
    eprintln!("wrote {} rows to {}", table.len(), a.out.display());
    Ok(())
}
