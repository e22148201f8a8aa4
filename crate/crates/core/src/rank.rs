//! The ranking tower: learnable token heads whose outputs are scored with
//! late interaction instead of being quantized.

use crate::error::{Error, Result};
use crate::ingest::{EncoderHead, Role, TokenEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankShape {
    pub d_base: usize,
    pub dim: usize,
    pub tokens: usize,
    pub hash_seed: u64,
}

impl Default for RankShape {
    fn default() -> Self {
        RankShape {
            d_base: 256,
            dim: 32,
            tokens: 4,
            hash_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankHead {
    pub tokens: usize,
    pub hash_seed: u64,
    pub encoder: TokenEncoder,
}

impl RankHead {
    pub fn new(shape: RankShape, seed: u64) -> Result<Self> {
        if shape.tokens == 0 {
            return Err(Error::Config("rank token count must be positive".into()));
        }
        Ok(RankHead {
            tokens: shape.tokens,
            hash_seed: shape.hash_seed,
            encoder: TokenEncoder::new(shape.d_base, shape.dim, shape.tokens, seed)?,
        })
    }

    pub fn shape(&self) -> RankShape {
        RankShape {
            d_base: self.encoder.d_base(),
            dim: self.encoder.dim(),
            tokens: self.tokens,
            hash_seed: self.hash_seed,
        }
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if self.encoder.weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rank head parameters".into()));
        }
        Ok(())
    }
}

impl EncoderHead for RankHead {
    fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    fn tokens_for(&self, role: Role) -> Result<usize> {
        match role {
            Role::RankQuery | Role::RankDocument => Ok(self.tokens),
            other => Err(Error::Config(format!("rank head cannot encode role {other:?}"))),
        }
    }
}
