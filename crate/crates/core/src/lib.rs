//! Model-based semantic inverted indexing.
//!
//! Multi-vector embeddings are discretized by a trainable finite scalar
//! quantization head into Semantic IDs (SIDs), stored in posting lists,
//! retrieved by SID union and re-ranked with late-interaction scoring.

pub mod ablation;
pub mod checkpoint;
mod codec;
pub mod error;
pub mod eval;
pub mod index;
pub mod ingest;
pub mod matcher;
pub mod pipeline;
pub mod quantizer;
pub mod rank;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
