//! End-to-end search: query → SIDs → posting-list union → late-interaction rerank.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::checkpoint::head_checksum;
use crate::error::{Error, Result};
use crate::index::{build_index, Fingerprint, InvertedIndex};
use crate::ingest::{hash_features, toy_encode, BaseFeature, EmbeddingTable, MultiVector, Role};
use crate::matcher::unirank_score;
use crate::quantizer::{multivector_sids, QuantizerHead, SemanticId};
use crate::rank::RankHead;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: String,
    pub score: f64,
    pub ordinal: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Text(String),
    Feature(BaseFeature),
    /// Precomputed touch (query role) and rank (rank-query role) vectors.
    Encoded { touch: MultiVector, rank: MultiVector },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub hits: Vec<SearchHit>,
    /// Candidates returned by the index before any cap.
    pub touched: usize,
    /// Set when `max_candidates` cut the candidate list.
    pub truncated: bool,
    pub query_sids: Vec<SemanticId>,
}

/// Orders hits by descending score, then ascending external id.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.doc_id.cmp(&b.doc_id))
}

/// Frozen index plus both heads and the stored document rank vectors.
#[derive(Debug, Clone)]
pub struct SearchEngine {
    index: InvertedIndex,
    touch: QuantizerHead,
    rank: RankHead,
    rank_docs: Vec<MultiVector>,
    max_candidates: Option<usize>,
}

impl SearchEngine {
    /// Fails if the index was not built by `touch` or a document lacks a rank vector.
    pub fn new(
        index: InvertedIndex,
        touch: QuantizerHead,
        rank: RankHead,
        rank_embeddings: &EmbeddingTable,
    ) -> Result<Self> {
        if index.fingerprint().head_checksum != head_checksum(&touch) {
            return Err(Error::FingerprintMismatch);
        }
        let rank_docs = index
            .doc_ids()
            .iter()
            .map(|id| {
                rank_embeddings
                    .get(id)
                    .cloned()
                    .ok_or_else(|| Error::MissingRankEmbedding(id.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(mv) = rank_docs.first() {
            if mv.dim() != rank.encoder.dim() {
                return Err(Error::DimensionMismatch {
                    expected: rank.encoder.dim(),
                    actual: mv.dim(),
                });
            }
        }
        Ok(SearchEngine {
            index,
            touch,
            rank,
            rank_docs,
            max_candidates: None,
        })
    }

    pub fn with_max_candidates(mut self, cap: Option<usize>) -> Self {
        self.max_candidates = cap;
        self
    }

    pub fn index(&self) -> &InvertedIndex {
        &self.index
    }

    pub fn touch_head(&self) -> &QuantizerHead {
        &self.touch
    }

    pub fn rank_head(&self) -> &RankHead {
        &self.rank
    }

    pub fn rank_doc(&self, ordinal: u32) -> &MultiVector {
        &self.rank_docs[ordinal as usize]
    }

    /// Touch and rank query vectors for an input.
    pub fn encode_query(&self, query: &QueryInput) -> Result<(MultiVector, MultiVector)> {
        match query {
            QueryInput::Text(text) => {
                let f = hash_features(text, self.touch.encoder.d_base(), self.touch.hash_seed)?;
                let rf = if self.rank.encoder.d_base() == self.touch.encoder.d_base()
                    && self.rank.hash_seed == self.touch.hash_seed
                {
                    f.clone()
                } else {
                    hash_features(text, self.rank.encoder.d_base(), self.rank.hash_seed)?
                };
                Ok((
                    toy_encode(&f, &self.touch, Role::Query)?,
                    toy_encode(&rf, &self.rank, Role::RankQuery)?,
                ))
            }
            QueryInput::Feature(f) => Ok((
                toy_encode(f, &self.touch, Role::Query)?,
                toy_encode(f, &self.rank, Role::RankQuery)?,
            )),
            QueryInput::Encoded { touch, rank } => Ok((touch.clone(), rank.clone())),
        }
    }

    pub fn search(&self, query: &QueryInput, top_k: usize) -> Result<SearchOutcome> {
        if top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        let (touch_mv, rank_mv) = self.encode_query(query)?;
        let query_sids = multivector_sids(&touch_mv, &self.touch)?;
        let retrieved = self.index.retrieve(&query_sids)?;
        let touched = retrieved.doc_ordinals.len();
        let mut candidates = retrieved.doc_ordinals;
        let truncated = match self.max_candidates {
            Some(cap) if candidates.len() > cap => {
                candidates.truncate(cap);
                true
            }
            _ => false,
        };
        let mut hits = candidates
            .into_iter()
            .map(|ord| {
                Ok(SearchHit {
                    doc_id: self.index.doc_id(ord).expect("ordinal in table").to_string(),
                    score: unirank_score(&rank_mv, &self.rank_docs[ord as usize])?,
                    ordinal: ord,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        hits.sort_by(hit_order);
        hits.truncate(top_k);
        Ok(SearchOutcome {
            hits,
            touched,
            truncated,
            query_sids,
        })
    }
}

/// Document SIDs for every `(id, feature)` pair.
pub fn document_sids<'a>(
    docs: impl IntoIterator<Item = (&'a str, &'a BaseFeature)>,
    touch: &QuantizerHead,
) -> Result<Vec<(String, Vec<SemanticId>)>> {
    docs.into_iter()
        .map(|(id, f)| {
            let mv = toy_encode(f, touch, Role::Document)?;
            Ok((id.to_string(), multivector_sids(&mv, touch)?))
        })
        .collect()
}

/// Rank-document vectors for every `(id, feature)` pair.
pub fn rank_embeddings<'a>(
    docs: impl IntoIterator<Item = (&'a str, &'a BaseFeature)>,
    rank: &RankHead,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::new();
    for (id, f) in docs {
        table.insert(id, toy_encode(f, rank, Role::RankDocument)?)?;
    }
    Ok(table)
}

/// Builds a searchable engine directly from featurized documents.
pub fn engine_from_features(
    docs: &[(String, BaseFeature)],
    touch: &QuantizerHead,
    rank: &RankHead,
) -> Result<SearchEngine> {
    let pairs = || docs.iter().map(|(id, f)| (id.as_str(), f));
    let sids = document_sids(pairs(), touch)?;
    let index = build_index(&sids, Fingerprint::of_head(touch))?;
    let table = rank_embeddings(pairs(), rank)?;
    SearchEngine::new(index, touch.clone(), rank.clone(), &table)
}
