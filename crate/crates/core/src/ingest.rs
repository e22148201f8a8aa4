//! Corpus and embedding ingestion, plus the toy hashing encoder that stands in
//! for a transformer tower.
//!
//! Text goes through two steps: [`hash_features`] turns a string into a
//! fixed-width, L2-normalized [`BaseFeature`] (signed character 3-gram
//! hashing), and [`toy_encode`] maps that feature through one `tanh` linear
//! layer per learnable token slot. Query and document roles share slot
//! weights, so a query with `M` tokens uses slots `0..M` and a document with
//! `N` tokens uses slots `0..N`.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: [u8; 4] = *b"UDXE";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Query,
    Document,
    RankQuery,
    RankDocument,
}

/// Token embeddings for one query or document, stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiVector {
    role: Role,
    dim: usize,
    data: Vec<f32>,
}

impl MultiVector {
    pub fn new(role: Role, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("multivector dim must be positive".into()));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::Validation(format!(
                "multivector payload of {} floats is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("multivector".into()));
        }
        Ok(MultiVector { role, dim, data })
    }

    pub fn from_rows(role: Role, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).ok_or(Error::Empty("multivector rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(role, dim, data)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tokens(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Keeps only the first `n` tokens.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Config(format!(
                "cannot truncate {} tokens to {n}",
                self.len()
            )));
        }
        Self::new(self.role, self.dim, self.data[..n * self.dim].to_vec())
    }
}

/// Dense hashed text feature. Unit L2 norm, or all-zero for text without 3-grams.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseFeature {
    pub values: Vec<f64>,
}

impl BaseFeature {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Wraps an arbitrary vector, normalizing it to unit length (zero stays zero).
    pub fn normalized(mut values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        BaseFeature { values }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingSource {
    External,
    ToyEncoder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub doc_count: usize,
    pub embedding_dim: usize,
    pub tokens_per_doc: usize,
    pub source: EmbeddingSource,
}

impl CorpusManifest {
    pub fn describe(table: &EmbeddingTable, source: EmbeddingSource) -> Result<Self> {
        let (tokens, dim) = table.shape().unwrap_or((1, 1));
        Ok(CorpusManifest {
            doc_count: table.len(),
            embedding_dim: dim,
            tokens_per_doc: tokens,
            source,
        })
    }
}

/// Reads a JSONL corpus of `{"id", "text"}` objects. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<DocumentRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<DocumentRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Id-keyed multi-vectors in insertion order, the in-memory form of a UDXE file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    entries: Vec<(String, MultiVector)>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// All entries must share one `(tokens, dim)` shape.
    pub fn insert(&mut self, id: impl Into<String>, mv: MultiVector) -> Result<()> {
        let id = id.into();
        if let Some((tokens, dim)) = self.shape() {
            if mv.len() != tokens || mv.dim() != dim {
                return Err(Error::Validation(format!(
                    "embedding {id:?} has shape {}x{}, table is {tokens}x{dim}",
                    mv.len(),
                    mv.dim()
                )));
            }
        }
        if self.by_id.contains_key(&id) {
            return Err(Error::DuplicateId(id));
        }
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push((id, mv));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&MultiVector> {
        self.by_id.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &MultiVector)> {
        self.entries.iter().map(|(id, mv)| (id.as_str(), mv))
    }

    /// `(tokens, dim)` of the stored vectors, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.entries.first().map(|(_, mv)| (mv.len(), mv.dim()))
    }
}

pub fn encode_embeddings(table: &EmbeddingTable) -> Result<Vec<u8>> {
    let (tokens, dim) = table.shape().unwrap_or((0, 0));
    let tokens = u16::try_from(tokens)
        .map_err(|_| Error::Config(format!("{tokens} tokens exceeds u16")))?;
    let dim = u16::try_from(dim).map_err(|_| Error::Config(format!("dim {dim} exceeds u16")))?;
    let mut w = ByteWriter::default();
    w.bytes(&EMBEDDING_MAGIC);
    w.u32(EMBEDDING_VERSION);
    w.u64(table.len() as u64);
    w.u16(tokens);
    w.u16(dim);
    for (id, mv) in table.iter() {
        w.string(id);
        for &v in mv.as_slice() {
            w.f32(v);
        }
    }
    Ok(w.buf)
}

pub fn decode_embeddings(bytes: &[u8], role: Role) -> Result<EmbeddingTable> {
    let mut r = ByteReader::new(bytes, "UDXE");
    r.magic(EMBEDDING_MAGIC)?;
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u64()?;
    let tokens = r.u16()? as usize;
    let dim = r.u16()? as usize;
    if count > 0 && (tokens == 0 || dim == 0) {
        return Err(Error::Validation("UDXE header declares zero tokens or dim".into()));
    }
    let mut table = EmbeddingTable::new();
    for _ in 0..count {
        let id = r.string()?;
        let raw = r.take(tokens * dim * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding {id:?}")));
        }
        table.insert(id, MultiVector::new(role, dim, data)?)?;
    }
    r.finish()?;
    Ok(table)
}

pub fn save_embeddings(table: &EmbeddingTable, path: &Path) -> Result<()> {
    write_file(path, &encode_embeddings(table)?)
}

pub fn load_embeddings(path: &Path, role: Role) -> Result<EmbeddingTable> {
    decode_embeddings(&read_file(path)?, role)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn gram_hash(gram: &[char], seed: u64) -> u64 {
    // FNV-1a over the UTF-8 bytes, seeded through the offset basis.
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ splitmix64(seed);
    let mut buf = [0u8; 4];
    for c in gram {
        for &b in c.encode_utf8(&mut buf).as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    splitmix64(h)
}

/// Signed character 3-gram feature hashing into `d_base` buckets.
///
/// Text is lowercased and padded with one space on each side so that single
/// short words still produce grams. The result is L2-normalized.
pub fn hash_features(text: &str, d_base: usize, seed: u64) -> Result<BaseFeature> {
    if d_base < 8 {
        return Err(Error::Config(format!("d_base must be >= 8, got {d_base}")));
    }
    let mut values = vec![0.0f64; d_base];
    if !text.is_empty() {
        let chars: Vec<char> = std::iter::once(' ')
            .chain(text.chars().flat_map(char::to_lowercase))
            .chain(std::iter::once(' '))
            .collect();
        for gram in chars.windows(3) {
            let h = gram_hash(gram, seed);
            let bucket = (h % d_base as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            values[bucket] += sign;
        }
    }
    Ok(BaseFeature::normalized(values))
}

/// Per-slot `tanh(W[t] · feature)` encoder weights, `slots × dim × d_base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEncoder {
    d_base: usize,
    dim: usize,
    slots: usize,
    pub(crate) weights: Vec<f64>,
}

/// RNG stream for encoder slot `slot`. Streams are per-slot so that adding
/// slots never changes the initialization of existing ones.
pub(crate) fn slot_stream(seed: u64, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + slot as u64);
    rng
}

pub(crate) fn uniform_fill(rng: &mut impl Rng, out: &mut [f64], fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    // Drawn at f32 precision so fresh heads survive a checkpoint round-trip unchanged.
    for v in out {
        *v = rng.random_range(-bound..=bound) as f32 as f64;
    }
}

impl TokenEncoder {
    pub fn new(d_base: usize, dim: usize, slots: usize, seed: u64) -> Result<Self> {
        if d_base == 0 || dim == 0 || slots == 0 {
            return Err(Error::Config(format!(
                "encoder needs positive d_base/dim/slots, got {d_base}/{dim}/{slots}"
            )));
        }
        let per_slot = dim * d_base;
        let mut weights = vec![0.0; slots * per_slot];
        for (slot, chunk) in weights.chunks_exact_mut(per_slot).enumerate() {
            uniform_fill(&mut slot_stream(seed, slot), chunk, d_base);
        }
        Ok(TokenEncoder {
            d_base,
            dim,
            slots,
            weights,
        })
    }

    pub(crate) fn from_weights(d_base: usize, dim: usize, slots: usize, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), slots * dim * d_base);
        TokenEncoder {
            d_base,
            dim,
            slots,
            weights,
        }
    }

    pub fn d_base(&self) -> usize {
        self.d_base
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub(crate) fn slot_weights(&self, slot: usize) -> &[f64] {
        let n = self.dim * self.d_base;
        &self.weights[slot * n..(slot + 1) * n]
    }

    /// Pre-activation and activation of one slot, in `f64`.
    pub(crate) fn forward_slot(&self, slot: usize, feature: &[f64]) -> Vec<f64> {
        let w = self.slot_weights(slot);
        w.chunks_exact(self.d_base)
            .map(|row| row.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>().tanh())
            .collect()
    }

    /// Encodes a feature into `tokens` vectors using slots `0..tokens`.
    pub fn encode(&self, feature: &BaseFeature, tokens: usize, role: Role) -> Result<MultiVector> {
        if feature.dim() != self.d_base {
            return Err(Error::DimensionMismatch {
                expected: self.d_base,
                actual: feature.dim(),
            });
        }
        if tokens == 0 || tokens > self.slots {
            return Err(Error::Config(format!(
                "requested {tokens} tokens, encoder has {} slots",
                self.slots
            )));
        }
        let mut data = Vec::with_capacity(tokens * self.dim);
        for slot in 0..tokens {
            data.extend(self.forward_slot(slot, &feature.values).into_iter().map(|v| v as f32));
        }
        MultiVector::new(role, self.dim, data)
    }
}

/// Anything that owns a [`TokenEncoder`] and knows how many tokens each role gets.
pub trait EncoderHead {
    fn encoder(&self) -> &TokenEncoder;
    fn tokens_for(&self, role: Role) -> Result<usize>;
}

pub fn toy_encode<H: EncoderHead + ?Sized>(
    feature: &BaseFeature,
    head: &H,
    role: Role,
) -> Result<MultiVector> {
    let tokens = head.tokens_for(role)?;
    head.encoder().encode(feature, tokens, role)
}
