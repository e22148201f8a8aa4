//! Down-projection, finite scalar quantization, SID packing, and up-projection.
//!
//! A token embedding `x ∈ R^d` becomes a semantic ID in three steps:
//!
//! ```text
//! low       = W_down · x + b_down                 (d_q)
//! pre_round = (K - 1) · sigmoid(low)
//! code      = round_half_up(pre_round)            ({0..K-1}^d_q)
//! sid       = Σ_t code[t] · K^t                   (dimension 0 is least significant)
//! recon     = W_up · code + b_up                  (d)
//! ```
//!
//! Rounding has no derivative; training backpropagates through it with
//! element-wise gradient scaling ([`ewgs_backward`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{uniform_fill, EncoderHead, MultiVector, Role, TokenEncoder};

/// Reserved RNG streams for projection weights; encoder slots use `1 + slot`.
const DOWN_STREAM: u64 = 1 << 32;
const UP_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig {
    /// Token embedding dimension `d`.
    pub dim: usize,
    /// Code dimension `d_q`.
    pub code_dim: usize,
    /// Levels per code dimension `K`.
    pub levels: u32,
    /// EWGS scaling factor `δ`.
    pub ewgs_delta: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            dim: 64,
            code_dim: 19,
            levels: 2,
            ewgs_delta: 1e-3,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {}", self.levels)));
        }
        if self.levels > u8::MAX as u32 {
            return Err(Error::Config(format!("K must fit in a byte, got {}", self.levels)));
        }
        if self.code_dim == 0 {
            return Err(Error::Config("d_q must be >= 1".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.code_space_checked().is_none() {
            return Err(Error::Config(format!(
                "K^d_q = {}^{} does not fit in 64 bits",
                self.levels, self.code_dim
            )));
        }
        if !(self.ewgs_delta >= 0.0 && self.ewgs_delta.is_finite()) {
            return Err(Error::Config(format!(
                "ewgs delta must be finite and >= 0, got {}",
                self.ewgs_delta
            )));
        }
        Ok(())
    }

    fn code_space_checked(&self) -> Option<u64> {
        let exp = u32::try_from(self.code_dim).ok()?;
        (self.levels as u64).checked_pow(exp)
    }

    /// Number of distinct SIDs, `K^d_q`.
    pub fn code_space(&self) -> u64 {
        self.code_space_checked().expect("validated config")
    }
}

/// Discrete code `S_i`, one level index per code dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeVector(pub Vec<u32>);

impl CodeVector {
    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&c| c as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub u64);

impl std::fmt::Display for SemanticId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedVector(pub Vec<f64>);

/// Token heads plus DownProj / UpProj for the retrieval (touch) model.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerHead {
    pub config: QuantizerConfig,
    pub query_tokens: usize,
    pub doc_tokens: usize,
    pub hash_seed: u64,
    pub encoder: TokenEncoder,
    /// `d_q × d`, row-major.
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
    /// `d × d_q`, row-major.
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
}

/// Shape of a touch head that is not part of [`QuantizerConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TouchShape {
    pub d_base: usize,
    pub query_tokens: usize,
    pub doc_tokens: usize,
    pub hash_seed: u64,
}

impl Default for TouchShape {
    fn default() -> Self {
        TouchShape {
            d_base: 256,
            query_tokens: 3,
            doc_tokens: 8,
            hash_seed: 0,
        }
    }
}

impl QuantizerHead {
    /// Seeded initialization: weights uniform in `±1/sqrt(fan_in)`, biases zero.
    ///
    /// Each parameter group draws from its own RNG stream and `W_down` is
    /// filled row by row, so heads that differ only in `d_q` or slot count
    /// agree on their shared prefix.
    pub fn new(config: QuantizerConfig, shape: TouchShape, seed: u64) -> Result<Self> {
        config.validate()?;
        if shape.query_tokens == 0 || shape.doc_tokens == 0 {
            return Err(Error::Config("token counts must be positive".into()));
        }
        let slots = shape.query_tokens.max(shape.doc_tokens);
        let encoder = TokenEncoder::new(shape.d_base, config.dim, slots, seed)?;
        let (d, dq) = (config.dim, config.code_dim);

        let mut w_down = vec![0.0; dq * d];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(DOWN_STREAM);
        for row in w_down.chunks_exact_mut(d) {
            uniform_fill(&mut rng, row, d);
        }
        let mut w_up = vec![0.0; d * dq];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(UP_STREAM);
        uniform_fill(&mut rng, &mut w_up, dq);

        Ok(QuantizerHead {
            config,
            query_tokens: shape.query_tokens,
            doc_tokens: shape.doc_tokens,
            hash_seed: shape.hash_seed,
            encoder,
            w_down,
            b_down: vec![0.0; dq],
            w_up,
            b_up: vec![0.0; d],
        })
    }

    pub fn shape(&self) -> TouchShape {
        TouchShape {
            d_base: self.encoder.d_base(),
            query_tokens: self.query_tokens,
            doc_tokens: self.doc_tokens,
            hash_seed: self.hash_seed,
        }
    }

    /// Same head with a different document token count (must fit in the encoder slots).
    pub fn with_doc_tokens(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.encoder.slots() {
            return Err(Error::Config(format!(
                "doc tokens {n} outside 1..={}",
                self.encoder.slots()
            )));
        }
        let mut out = self.clone();
        out.doc_tokens = n;
        Ok(out)
    }

    /// Same head with a different query token count (must fit in the encoder slots).
    pub fn with_query_tokens(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.encoder.slots() {
            return Err(Error::Config(format!(
                "query tokens {m} outside 1..={}",
                self.encoder.slots()
            )));
        }
        let mut out = self.clone();
        out.query_tokens = m;
        Ok(out)
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let all = [
            &self.encoder.weights,
            &self.w_down,
            &self.b_down,
            &self.w_up,
            &self.b_up,
        ];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("quantizer head parameters".into()));
        }
        Ok(())
    }
}

impl EncoderHead for QuantizerHead {
    fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    fn tokens_for(&self, role: Role) -> Result<usize> {
        match role {
            Role::Query => Ok(self.query_tokens),
            Role::Document => Ok(self.doc_tokens),
            other => Err(Error::Config(format!("touch head cannot encode role {other:?}"))),
        }
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn matvec(w: &[f64], x: &[f64], bias: &[f64]) -> Vec<f64> {
    let cols = x.len();
    w.chunks_exact(cols)
        .zip(bias)
        .map(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b)
        .collect()
}

pub fn down_project(token: &[f64], head: &QuantizerHead) -> Result<Vec<f64>> {
    check_len(head.config.dim, token.len())?;
    Ok(matvec(&head.w_down, token, &head.b_down))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(K - 1) · sigmoid(low)`, the value that gets rounded.
pub fn pre_round(low: &[f64], levels: u32) -> Vec<f64> {
    let scale = (levels - 1) as f64;
    low.iter().map(|&v| scale * sigmoid(v)).collect()
}

fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

pub fn fsq_quantize(low: &[f64], config: &QuantizerConfig) -> Result<CodeVector> {
    check_len(config.code_dim, low.len())?;
    if low.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("down-projection".into()));
    }
    let max = (config.levels - 1) as f64;
    Ok(CodeVector(
        pre_round(low, config.levels)
            .into_iter()
            .map(|p| round_half_up(p).clamp(0.0, max) as u32)
            .collect(),
    ))
}

pub fn pack_sid(codes: &CodeVector, config: &QuantizerConfig) -> Result<SemanticId> {
    check_len(config.code_dim, codes.0.len())?;
    let k = config.levels as u64;
    let mut sid = 0u64;
    for &c in codes.0.iter().rev() {
        if c >= config.levels {
            return Err(Error::Validation(format!("code {c} outside 0..{}", config.levels)));
        }
        sid = sid * k + c as u64;
    }
    Ok(SemanticId(sid))
}

pub fn unpack_sid(sid: SemanticId, config: &QuantizerConfig) -> Result<CodeVector> {
    let space = config.code_space();
    if sid.0 >= space {
        return Err(Error::SidOutOfRange { sid: sid.0, space });
    }
    let k = config.levels as u64;
    let mut rest = sid.0;
    let codes = (0..config.code_dim)
        .map(|_| {
            let c = rest % k;
            rest /= k;
            c as u32
        })
        .collect();
    Ok(CodeVector(codes))
}

pub fn up_project(codes: &CodeVector, head: &QuantizerHead) -> Result<ReconstructedVector> {
    check_len(head.config.code_dim, codes.0.len())?;
    Ok(ReconstructedVector(matvec(&head.w_up, &codes.as_f64(), &head.b_up)))
}

/// Forward result of one token, with the intermediates the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEncoding {
    pub sid: SemanticId,
    pub codes: CodeVector,
    pub low: Vec<f64>,
    pub pre_round: Vec<f64>,
    pub recon: ReconstructedVector,
}

pub fn encode_token(token: &[f64], head: &QuantizerHead) -> Result<TokenEncoding> {
    let low = down_project(token, head)?;
    let codes = fsq_quantize(&low, &head.config)?;
    let sid = pack_sid(&codes, &head.config)?;
    let recon = up_project(&codes, head)?;
    let pre_round = pre_round(&low, head.config.levels);
    Ok(TokenEncoding {
        sid,
        codes,
        low,
        pre_round,
        recon,
    })
}

/// One `(sid, reconstruction)` per token, in token order, duplicates kept.
pub fn encode_multivector(
    mv: &MultiVector,
    head: &QuantizerHead,
) -> Result<Vec<(SemanticId, ReconstructedVector)>> {
    mv.tokens()
        .map(|t| {
            let t: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            encode_token(&t, head).map(|e| (e.sid, e.recon))
        })
        .collect()
}

/// SIDs only; the hot path for indexing and query encoding.
pub fn multivector_sids(mv: &MultiVector, head: &QuantizerHead) -> Result<Vec<SemanticId>> {
    mv.tokens()
        .map(|t| {
            let t: Vec<f64> = t.iter().map(|&v| v as f64).collect();
            let low = down_project(&t, head)?;
            pack_sid(&fsq_quantize(&low, &head.config)?, &head.config)
        })
        .collect()
}

/// Element-wise gradient scaling through `round`:
/// `g_out = g_in · (1 + δ · sign(g_in) · (pre_round − code))`.
pub fn ewgs_backward(grad: &[f64], pre_round: &[f64], code: &[f64], delta: f64) -> Vec<f64> {
    grad.iter()
        .zip(pre_round)
        .zip(code)
        .map(|((&g, &x), &q)| {
            let sign = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            g * (1.0 + delta * sign * (x - q))
        })
        .collect()
}
