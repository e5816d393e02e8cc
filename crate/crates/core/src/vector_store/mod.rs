//! Chunked text knowledge with exhaustive cosine retrieval.
//!
//! Textbooks, dialogue demonstrations and serialized sensor windows all live
//! in one [`VectorStore`], partitioned by [`ChunkKind`] and source id prefix.

mod chunk;
mod persist;
mod store;
mod sync;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;

pub use chunk::{chunk_document, reconstruct, Chunk, ChunkPolicy};
pub use persist::{SNAPSHOT_FORMAT, SNAPSHOT_VERSION};
pub use store::{QueryFilter, StoredChunk, VectorStore};
pub use sync::{SensorWindowSource, SourceDocument, SyncEvent, SyncReport, TimeWindow};

#[derive(Debug, Error)]
pub enum VectorStoreError {
    #[error("invalid chunk policy: chunk_size={chunk_size}, overlap={overlap} (need 0 <= overlap < chunk_size)")]
    InvalidPolicy { chunk_size: usize, overlap: usize },
    #[error("chunk {index} has empty text")]
    EmptyChunk { index: usize },
    #[error("embedding failed at chunk {index}: {source}")]
    Embedding {
        index: usize,
        #[source]
        source: GatewayError,
    },
    #[error("query embedding failed: {0}")]
    QueryEmbedding(#[source] GatewayError),
    #[error("embedding dimension mismatch: store has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid embedding: {0}")]
    InvalidVector(String),
    #[error("unresolvable sync payload: {0}")]
    Unresolvable(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {path}: {message}")]
    Corrupt { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, VectorStoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChunkKind {
    Textbook,
    Dialogue,
    Sensor,
    GuidelineAux,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChunkId(pub u64);

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Finite, non-empty embedding. Stored unnormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(VectorStoreError::InvalidVector("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(VectorStoreError::InvalidVector("NaN or Inf entry".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; 0 when either side is the zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let dot: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum();
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (dot / denom).clamp(-1.0, 1.0)
        }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = VectorStoreError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub chunk_id: ChunkId,
    pub similarity: f64,
    /// 1-based.
    pub rank: usize,
}
