//! Recall@K / MRR@K and the evaluation loop over a labeled query set.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DocumentRecord;
use crate::pipeline::{QueryInput, SearchEngine};

/// `|top-K ∩ relevant| / |relevant|`.
pub fn recall_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    if relevant.is_empty() {
        return Err(Error::Empty("relevant set"));
    }
    let hits = ranked.iter().take(k).filter(|id| relevant.contains(id)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Reciprocal rank of the first relevant item within the top K, else 0.
pub fn mrr_at_k<T: Eq + Hash>(ranked: &[T], relevant: &HashSet<T>, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".into()));
    }
    Ok(ranked
        .iter()
        .take(k)
        .position(|id| relevant.contains(id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestQuery {
    pub query: DocumentRecord,
    pub relevant_ids: Vec<String>,
}

pub fn parse_test_queries(reader: impl BufRead) -> Result<Vec<TestQuery>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<test queries>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn load_test_queries(path: &Path) -> Result<Vec<TestQuery>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_test_queries(BufReader::new(file))
}

/// One evaluated query: what the engine returned, for dumps and recomputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub query_id: String,
    pub ranked_ids: Vec<String>,
    pub relevant_ids: Vec<String>,
    pub retrieved: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub mrr_at_k: BTreeMap<usize, f64>,
    pub avg_retrieved: f64,
    pub query_count: usize,
}

/// A labeled query the evaluator can run.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub id: String,
    pub input: QueryInput,
    pub relevant_ids: Vec<String>,
}

impl From<&TestQuery> for EvalQuery {
    fn from(t: &TestQuery) -> Self {
        EvalQuery {
            id: t.query.id.clone(),
            input: QueryInput::Text(t.query.text.clone()),
            relevant_ids: t.relevant_ids.clone(),
        }
    }
}

/// Runs every query through the engine and returns the ranked lists.
///
/// Queries are spread over scoped threads; results keep input order.
pub fn rank_queries(queries: &[EvalQuery], engine: &SearchEngine, top_k: usize) -> Result<Vec<RankedQuery>> {
    for q in queries {
        if let Some(missing) = q.relevant_ids.iter().find(|id| engine.index().ordinal(id).is_none()) {
            return Err(Error::UnknownId(missing.clone()));
        }
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = queries.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<RankedQuery>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|q| {
                            let out = engine.search(&q.input, top_k)?;
                            Ok(RankedQuery {
                                query_id: q.id.clone(),
                                ranked_ids: out.hits.into_iter().map(|h| h.doc_id).collect(),
                                relevant_ids: q.relevant_ids.clone(),
                                retrieved: out.touched,
                            })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Averages metrics over queries that have at least one relevant document.
pub fn report_from_rankings(rankings: &[RankedQuery], ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() {
        return Err(Error::Config("at least one K is required".into()));
    }
    let counted: Vec<&RankedQuery> = rankings.iter().filter(|r| !r.relevant_ids.is_empty()).collect();
    if counted.is_empty() {
        return Err(Error::Empty("test set with relevant documents"));
    }
    let n = counted.len() as f64;
    let mut recall = BTreeMap::new();
    let mut mrr = BTreeMap::new();
    for &k in ks {
        let (mut r, mut m) = (0.0, 0.0);
        for q in &counted {
            let rel: HashSet<&String> = q.relevant_ids.iter().collect();
            let ranked: Vec<&String> = q.ranked_ids.iter().collect();
            r += recall_at_k(&ranked, &rel, k)?;
            m += mrr_at_k(&ranked, &rel, k)?;
        }
        recall.insert(k, r / n);
        mrr.insert(k, m / n);
    }
    Ok(EvalReport {
        recall_at_k: recall,
        mrr_at_k: mrr,
        avg_retrieved: rankings.iter().map(|r| r.retrieved as f64).sum::<f64>() / rankings.len() as f64,
        query_count: counted.len(),
    })
}

pub fn evaluate(queries: &[EvalQuery], engine: &SearchEngine, ks: &[usize]) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let top_k = ks.iter().copied().max().ok_or_else(|| Error::Config("at least one K is required".into()))?;
    let rankings = rank_queries(queries, engine, top_k)?;
    report_from_rankings(&rankings, ks)
}
