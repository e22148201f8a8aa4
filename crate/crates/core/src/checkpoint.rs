//! UDXQ head checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "UDXQ"  u32 version=1  u8 kind (0 = touch, 1 = rank)
//! f64 d  f64 d_q  f64 K  f64 delta          (d_q = K = delta = 0 for rank heads)
//! u32 d_base  u16 query_tokens  u16 doc_tokens  u16 slots  u64 hash_seed
//! f32 encoder weights   slots × d × d_base, row-major
//! f32 W_down (d_q × d)  f32 b_down (d_q)  f32 W_up (d × d_q)  f32 b_up (d)   touch only
//! ```
//!
//! Parameters are stored as `f32`. Heads are "snapped" to `f32` precision
//! before use so that an in-memory head and its reloaded checkpoint produce
//! identical SIDs and scores.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::ingest::TokenEncoder;
use crate::quantizer::{QuantizerConfig, QuantizerHead};
use crate::rank::RankHead;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UDXQ";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TOUCH: u8 = 0;
const KIND_RANK: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Touch(QuantizerHead),
    Rank(RankHead),
}

fn f64_as_count(v: f64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
        return Err(Error::Validation(format!("checkpoint {what} = {v} is not a count")));
    }
    Ok(v as usize)
}

fn write_params(w: &mut ByteWriter, params: &[f64]) {
    for &p in params {
        w.f32(p as f32);
    }
}

fn read_params(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f64>> {
    let raw = r.take(n * 4)?;
    let out: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok(out)
}

fn write_header(w: &mut ByteWriter, kind: u8, cfg: [f64; 4], enc: &TokenEncoder, q: usize, d: usize, seed: u64) {
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(kind);
    for v in cfg {
        w.f64(v);
    }
    w.u32(enc.d_base() as u32);
    w.u16(q as u16);
    w.u16(d as u16);
    w.u16(enc.slots() as u16);
    w.u64(seed);
}

pub fn encode_touch(head: &QuantizerHead) -> Vec<u8> {
    let c = &head.config;
    let mut w = ByteWriter::default();
    write_header(
        &mut w,
        KIND_TOUCH,
        [c.dim as f64, c.code_dim as f64, c.levels as f64, c.ewgs_delta],
        &head.encoder,
        head.query_tokens,
        head.doc_tokens,
        head.hash_seed,
    );
    write_params(&mut w, &head.encoder.weights);
    write_params(&mut w, &head.w_down);
    write_params(&mut w, &head.b_down);
    write_params(&mut w, &head.w_up);
    write_params(&mut w, &head.b_up);
    w.buf
}

pub fn encode_rank(head: &RankHead) -> Vec<u8> {
    let mut w = ByteWriter::default();
    write_header(
        &mut w,
        KIND_RANK,
        [head.encoder.dim() as f64, 0.0, 0.0, 0.0],
        &head.encoder,
        head.tokens,
        head.tokens,
        head.hash_seed,
    );
    write_params(&mut w, &head.encoder.weights);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader::new(bytes, "UDXQ");
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = r.u8()?;
    let dim = f64_as_count(r.f64()?, "d")?;
    let code_dim = f64_as_count(r.f64()?, "d_q")?;
    let levels = f64_as_count(r.f64()?, "K")?;
    let ewgs_delta = r.f64()?;
    let d_base = r.u32()? as usize;
    let query_tokens = r.u16()? as usize;
    let doc_tokens = r.u16()? as usize;
    let slots = r.u16()? as usize;
    let hash_seed = r.u64()?;
    if d_base == 0 || dim == 0 || slots == 0 || query_tokens == 0 || doc_tokens == 0 {
        return Err(Error::Validation("checkpoint has a zero-sized dimension".into()));
    }
    if query_tokens > slots || doc_tokens > slots {
        return Err(Error::Validation("checkpoint token counts exceed encoder slots".into()));
    }
    let weights = read_params(&mut r, slots * dim * d_base)?;
    let encoder = TokenEncoder::from_weights(d_base, dim, slots, weights);
    let out = match kind {
        KIND_TOUCH => {
            let config = QuantizerConfig {
                dim,
                code_dim,
                levels: levels as u32,
                ewgs_delta,
            };
            config.validate()?;
            let w_down = read_params(&mut r, code_dim * dim)?;
            let b_down = read_params(&mut r, code_dim)?;
            let w_up = read_params(&mut r, dim * code_dim)?;
            let b_up = read_params(&mut r, dim)?;
            Checkpoint::Touch(QuantizerHead {
                config,
                query_tokens,
                doc_tokens,
                hash_seed,
                encoder,
                w_down,
                b_down,
                w_up,
                b_up,
            })
        }
        KIND_RANK => {
            if query_tokens != doc_tokens {
                return Err(Error::Validation("rank checkpoint token counts differ".into()));
            }
            Checkpoint::Rank(RankHead {
                tokens: query_tokens,
                hash_seed,
                encoder,
            })
        }
        other => return Err(Error::Validation(format!("unknown checkpoint kind {other}"))),
    };
    r.finish()?;
    Ok(out)
}

pub fn save_touch(head: &QuantizerHead, path: &Path) -> Result<()> {
    write_file(path, &encode_touch(head))
}

pub fn save_rank(head: &RankHead, path: &Path) -> Result<()> {
    write_file(path, &encode_rank(head))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_file(path)?)
}

pub fn load_touch(path: &Path) -> Result<QuantizerHead> {
    match load(path)? {
        Checkpoint::Touch(h) => Ok(h),
        Checkpoint::Rank(_) => Err(Error::Config(format!(
            "{} is a rank checkpoint, expected a touch checkpoint",
            path.display()
        ))),
    }
}

pub fn load_rank(path: &Path) -> Result<RankHead> {
    match load(path)? {
        Checkpoint::Rank(h) => Ok(h),
        Checkpoint::Touch(_) => Err(Error::Config(format!(
            "{} is a touch checkpoint, expected a rank checkpoint",
            path.display()
        ))),
    }
}

/// SHA-256 of the serialized touch checkpoint; stored in index fingerprints.
pub fn head_checksum(head: &QuantizerHead) -> [u8; 32] {
    Sha256::digest(encode_touch(head)).into()
}

fn snap(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

/// Rounds every parameter to `f32`, matching what a checkpoint round-trip yields.
pub fn snap_touch(head: &mut QuantizerHead) {
    snap(&mut head.encoder.weights);
    snap(&mut head.w_down);
    snap(&mut head.b_down);
    snap(&mut head.w_up);
    snap(&mut head.b_up);
}

pub fn snap_rank(head: &mut RankHead) {
    snap(&mut head.encoder.weights);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::TouchShape;
    use crate::rank::RankShape;

    #[test]
    fn touch_roundtrip_bytes() {
        let shape = TouchShape {
            d_base: 16,
            ..TouchShape::default()
        };
        let cfg = QuantizerConfig {
            dim: 12,
            code_dim: 7,
            ..QuantizerConfig::default()
        };
        let mut h = QuantizerHead::new(cfg, shape, 3).unwrap();
        h.b_up[0] = 0.123456789;
        let bytes = encode_touch(&h);
        let back = match decode(&bytes).unwrap() {
            Checkpoint::Touch(b) => b,
            _ => unreachable!(),
        };
        assert_eq!(encode_touch(&back), bytes);
        let mut snapped = h.clone();
        snap_touch(&mut snapped);
        assert_eq!(back, snapped);
        assert_eq!(head_checksum(&back), head_checksum(&h));
    }

    #[test]
    fn rank_roundtrip_and_kind_checks() {
        let h = RankHead::new(RankShape { d_base: 16, ..RankShape::default() }, 1).unwrap();
        let bytes = encode_rank(&h);
        assert_eq!(decode(&bytes).unwrap(), Checkpoint::Rank(h));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated(_))));
    }
}
