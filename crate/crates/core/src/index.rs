//! Semantic inverted index: SID → sorted posting list of document ordinals.
//!
//! Documents get dense `u32` ordinals in insertion order; the external id lives
//! in a side table. Removing a document shifts every later ordinal down by
//! one, so an index is always identical to a fresh [`build_index`] over its
//! remaining documents in insertion order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::head_checksum;
use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::quantizer::{QuantizerConfig, QuantizerHead, SemanticId};

pub const INDEX_MAGIC: [u8; 4] = *b"UDXI";
pub const INDEX_VERSION: u32 = 1;

/// Identifies the quantizer that produced an index's SIDs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    pub code_dim: u8,
    pub levels: u8,
    pub head_checksum: [u8; 32],
}

impl Fingerprint {
    pub fn of_head(head: &QuantizerHead) -> Self {
        Fingerprint {
            code_dim: head.config.code_dim as u8,
            levels: head.config.levels as u8,
            head_checksum: head_checksum(head),
        }
    }

    /// Fingerprint for SIDs that did not come from a saved head (tests, tooling).
    pub fn unchecked(config: &QuantizerConfig) -> Self {
        Fingerprint {
            code_dim: config.code_dim as u8,
            levels: config.levels as u8,
            head_checksum: [0; 32],
        }
    }

    pub fn code_space(&self) -> u64 {
        (self.levels as u64)
            .checked_pow(self.code_dim as u32)
            .unwrap_or(u64::MAX)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostingList {
    pub sid: SemanticId,
    pub doc_ordinals: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub num_docs: usize,
    pub num_distinct_sids: usize,
    pub total_postings: usize,
    pub avg_postings_per_doc: f64,
    pub avg_retrieved_per_query: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetrievalResult {
    /// Deduplicated union, ascending.
    pub doc_ordinals: Vec<u32>,
    /// Posting length per distinct query SID (0 for SIDs absent from the index).
    pub per_sid_counts: BTreeMap<SemanticId, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    fingerprint: Fingerprint,
    postings: BTreeMap<SemanticId, Vec<u32>>,
    doc_ids: Vec<String>,
    ordinal_of: HashMap<String, u32>,
    /// Distinct SIDs per ordinal, ascending; needed for removal.
    doc_sids: Vec<Vec<SemanticId>>,
}

fn distinct_sorted(sids: &[SemanticId]) -> Vec<SemanticId> {
    let mut v = sids.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

impl InvertedIndex {
    pub fn new(fingerprint: Fingerprint) -> Self {
        InvertedIndex {
            fingerprint,
            postings: BTreeMap::new(),
            doc_ids: Vec::new(),
            ordinal_of: HashMap::new(),
            doc_sids: Vec::new(),
        }
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_id(&self, ordinal: u32) -> Option<&str> {
        self.doc_ids.get(ordinal as usize).map(String::as_str)
    }

    pub fn ordinal(&self, id: &str) -> Option<u32> {
        self.ordinal_of.get(id).copied()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    /// Distinct SIDs stored for a document.
    pub fn doc_sids(&self, ordinal: u32) -> Option<&[SemanticId]> {
        self.doc_sids.get(ordinal as usize).map(Vec::as_slice)
    }

    pub fn posting(&self, sid: SemanticId) -> Option<&[u32]> {
        self.postings.get(&sid).map(Vec::as_slice)
    }

    pub fn postings(&self) -> impl Iterator<Item = PostingList> + '_ {
        self.postings.iter().map(|(&sid, ords)| PostingList {
            sid,
            doc_ordinals: ords.clone(),
        })
    }

    fn check_sid(&self, sid: SemanticId) -> Result<()> {
        let space = self.fingerprint.code_space();
        if sid.0 >= space {
            return Err(Error::SidOutOfRange { sid: sid.0, space });
        }
        Ok(())
    }

    /// Appends a document under each of its distinct SIDs.
    pub fn insert_doc(&mut self, id: &str, sids: &[SemanticId]) -> Result<u32> {
        if id.is_empty() {
            return Err(Error::Validation("document id must be nonempty".into()));
        }
        if self.ordinal_of.contains_key(id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        for &sid in sids {
            self.check_sid(sid)?;
        }
        let ordinal = u32::try_from(self.doc_ids.len())
            .map_err(|_| Error::Validation("index is full (u32 ordinals)".into()))?;
        let distinct = distinct_sorted(sids);
        for &sid in &distinct {
            // New ordinals are the largest, so pushing keeps postings sorted.
            self.postings.entry(sid).or_default().push(ordinal);
        }
        self.doc_ids.push(id.to_string());
        self.ordinal_of.insert(id.to_string(), ordinal);
        self.doc_sids.push(distinct);
        Ok(ordinal)
    }

    /// Removes a document and renumbers later ordinals down by one.
    pub fn remove_doc(&mut self, id: &str) -> Result<()> {
        let ordinal = self
            .ordinal_of
            .remove(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let sids = self.doc_sids.remove(ordinal as usize);
        self.doc_ids.remove(ordinal as usize);
        for sid in sids {
            let list = self.postings.get_mut(&sid).expect("posting for stored sid");
            if let Ok(pos) = list.binary_search(&ordinal) {
                list.remove(pos);
            }
            if list.is_empty() {
                self.postings.remove(&sid);
            }
        }
        if (ordinal as usize) < self.doc_ids.len() {
            for list in self.postings.values_mut() {
                let start = list.partition_point(|&o| o < ordinal);
                for o in &mut list[start..] {
                    *o -= 1;
                }
            }
            for (k, id) in self.doc_ids.iter().enumerate().skip(ordinal as usize) {
                *self.ordinal_of.get_mut(id).expect("id mapped") = k as u32;
            }
        }
        Ok(())
    }

    /// Union of the postings of every distinct query SID.
    pub fn retrieve(&self, query_sids: &[SemanticId]) -> Result<RetrievalResult> {
        let mut per_sid_counts = BTreeMap::new();
        let mut union = Vec::new();
        for &sid in query_sids {
            self.check_sid(sid)?;
            if per_sid_counts.contains_key(&sid) {
                continue;
            }
            let list = self.postings.get(&sid).map(Vec::as_slice).unwrap_or(&[]);
            per_sid_counts.insert(sid, list.len());
            union.extend_from_slice(list);
        }
        union.sort_unstable();
        union.dedup();
        Ok(RetrievalResult {
            doc_ordinals: union,
            per_sid_counts,
        })
    }

    /// Size statistics; `avg_retrieved_per_query` is filled from `query_log` when given.
    pub fn stats(&self, query_log: Option<&[Vec<SemanticId>]>) -> Result<IndexStats> {
        let total_postings: usize = self.postings.values().map(Vec::len).sum();
        let num_docs = self.num_docs();
        let avg_retrieved_per_query = match query_log {
            Some(log) if !log.is_empty() => {
                let mut sum = 0usize;
                for q in log {
                    sum += self.retrieve(q)?.doc_ordinals.len();
                }
                sum as f64 / log.len() as f64
            }
            _ => 0.0,
        };
        Ok(IndexStats {
            num_docs,
            num_distinct_sids: self.postings.len(),
            total_postings,
            avg_postings_per_doc: if num_docs == 0 {
                0.0
            } else {
                total_postings as f64 / num_docs as f64
            },
            avg_retrieved_per_query,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(&INDEX_MAGIC);
        w.u32(INDEX_VERSION);
        w.u8(self.fingerprint.code_dim);
        w.u8(self.fingerprint.levels);
        w.bytes(&self.fingerprint.head_checksum);
        w.u64(self.doc_ids.len() as u64);
        for id in &self.doc_ids {
            w.string(id);
        }
        w.u64(self.postings.len() as u64);
        for (sid, list) in &self.postings {
            w.u64(sid.0);
            w.u32(list.len() as u32);
            for &o in list {
                w.u32(o);
            }
        }
        w.buf
    }

    /// Parses a UDXI image. With `expected_checksum`, rejects indexes built by another head.
    pub fn from_bytes(bytes: &[u8], expected_checksum: Option<&[u8; 32]>) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "UDXI");
        r.magic(INDEX_MAGIC)?;
        let version = r.u32()?;
        if version != INDEX_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let code_dim = r.u8()?;
        let levels = r.u8()?;
        let head_checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
        if let Some(expected) = expected_checksum {
            if *expected != head_checksum {
                return Err(Error::FingerprintMismatch);
            }
        }
        let fingerprint = Fingerprint {
            code_dim,
            levels,
            head_checksum,
        };
        let mut index = InvertedIndex::new(fingerprint);
        let doc_count = r.u64()?;
        for _ in 0..doc_count {
            let id = r.string()?;
            let ord = index.doc_ids.len() as u32;
            if index.ordinal_of.insert(id.clone(), ord).is_some() {
                return Err(Error::DuplicateId(id));
            }
            index.doc_ids.push(id);
            index.doc_sids.push(Vec::new());
        }
        let posting_count = r.u64()?;
        let mut last_sid: Option<SemanticId> = None;
        for _ in 0..posting_count {
            let sid = SemanticId(r.u64()?);
            index.check_sid(sid)?;
            if last_sid.is_some_and(|p| p >= sid) {
                return Err(Error::Validation("UDXI postings not sorted by SID".into()));
            }
            last_sid = Some(sid);
            let len = r.u32()? as usize;
            if len == 0 {
                return Err(Error::Validation(format!("UDXI posting for sid {sid} is empty")));
            }
            let raw = r.take(len * 4)?;
            let mut list = Vec::with_capacity(len);
            for c in raw.chunks_exact(4) {
                let o = u32::from_le_bytes(c.try_into().unwrap());
                if o as u64 >= doc_count || list.last().is_some_and(|&p| p >= o) {
                    return Err(Error::Validation(format!(
                        "UDXI posting for sid {sid} has invalid ordinal {o}"
                    )));
                }
                list.push(o);
                index.doc_sids[o as usize].push(sid);
            }
            index.postings.insert(sid, list);
        }
        r.finish()?;
        Ok(index)
    }
}

pub fn build_index(docs: &[(String, Vec<SemanticId>)], fingerprint: Fingerprint) -> Result<InvertedIndex> {
    let mut index = InvertedIndex::new(fingerprint);
    for (id, sids) in docs {
        index.insert_doc(id, sids)?;
    }
    Ok(index)
}

pub fn save_index(index: &InvertedIndex, path: &Path) -> Result<()> {
    write_file(path, &index.to_bytes())
}

pub fn load_index(path: &Path, expected_checksum: Option<&[u8; 32]>) -> Result<InvertedIndex> {
    InvertedIndex::from_bytes(&read_file(path)?, expected_checksum)
}
