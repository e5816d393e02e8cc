use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::persist::{Journal, JournalOp};
use super::{
    Chunk, ChunkId, ChunkKind, EmbeddingVector, Result, RetrievalHit, VectorStoreError,
};
use crate::gateway::{check_embeddings, Embedder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredChunk {
    pub id: ChunkId,
    pub chunk: Chunk,
    pub vector: EmbeddingVector,
}

/// Restricts a query to one partition of the store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryFilter {
    pub kind: Option<ChunkKind>,
    pub source_prefix: Option<String>,
}

impl QueryFilter {
    pub fn kind(kind: ChunkKind) -> Self {
        Self {
            kind: Some(kind),
            source_prefix: None,
        }
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.source_prefix = Some(prefix.into());
        self
    }

    fn admits(&self, chunk: &Chunk) -> bool {
        self.kind.is_none_or(|k| k == chunk.kind)
            && self
                .source_prefix
                .as_ref()
                .is_none_or(|p| chunk.source_id.starts_with(p.as_str()))
    }
}

type SpanKey = (String, usize, usize);

fn span_key(chunk: &Chunk) -> SpanKey {
    (chunk.source_id.clone(), chunk.span.0, chunk.span.1)
}

/// In-memory chunk store with brute-force cosine search.
///
/// Entries stay sorted by id. Re-upserting a chunk with the same
/// `(source_id, span)` replaces its text and vector but keeps its id.
#[derive(Debug, Default)]
pub struct VectorStore {
    dim: Option<usize>,
    entries: Vec<StoredChunk>,
    by_span: HashMap<SpanKey, usize>,
    next_id: u64,
    pub(super) journal: Option<Journal>,
}

impl VectorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredChunk> {
        self.entries.iter()
    }

    pub fn get(&self, id: ChunkId) -> Option<&StoredChunk> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn chunks_of<'a>(&'a self, source_id: &'a str) -> impl Iterator<Item = &'a StoredChunk> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.chunk.source_id == source_id)
    }

    pub fn count_kind(&self, kind: ChunkKind) -> usize {
        self.entries.iter().filter(|e| e.chunk.kind == kind).count()
    }

    /// Embeds and stores `chunks`, returning one id per chunk. On any failure
    /// the store is left unchanged.
    pub fn upsert_chunks(&mut self, chunks: Vec<Chunk>, embedder: &dyn Embedder) -> Result<Vec<ChunkId>> {
        if let Some(index) = chunks.iter().position(|c| c.text.is_empty()) {
            return Err(VectorStoreError::EmptyChunk { index });
        }
        if chunks.is_empty() {
            return Ok(Vec::new());
        }
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = embed_all(embedder, &texts)?;
        self.upsert_embedded(chunks.into_iter().zip(vectors).collect())
    }

    pub(crate) fn upsert_embedded(&mut self, items: Vec<(Chunk, EmbeddingVector)>) -> Result<Vec<ChunkId>> {
        let mut dim = self.dim;
        for (_, v) in &items {
            match dim {
                Some(d) if d != v.dim() => {
                    return Err(VectorStoreError::DimensionMismatch {
                        expected: d,
                        actual: v.dim(),
                    })
                }
                _ => dim = Some(v.dim()),
            }
        }
        let mut ids = Vec::with_capacity(items.len());
        for (chunk, vector) in items {
            let id = match self.by_span.get(&span_key(&chunk)) {
                Some(&pos) => self.entries[pos].id,
                None => ChunkId(self.next_id),
            };
            if let Some(journal) = &mut self.journal {
                journal.append(&JournalOp::Upsert {
                    id,
                    chunk: chunk.clone(),
                    vector: vector.clone(),
                })?;
            }
            self.put(StoredChunk { id, chunk, vector });
            ids.push(id);
        }
        Ok(ids)
    }

    /// Inserts or replaces by id without journaling.
    pub(super) fn put(&mut self, entry: StoredChunk) {
        self.dim.get_or_insert(entry.vector.dim());
        self.next_id = self.next_id.max(entry.id.0 + 1);
        match self.entries.binary_search_by_key(&entry.id, |e| e.id) {
            Ok(pos) => {
                let old_key = span_key(&self.entries[pos].chunk);
                self.by_span.remove(&old_key);
                self.by_span.insert(span_key(&entry.chunk), pos);
                self.entries[pos] = entry;
            }
            Err(pos) => {
                let appended = pos == self.entries.len();
                self.entries.insert(pos, entry);
                if appended {
                    self.by_span.insert(span_key(&self.entries[pos].chunk), pos);
                } else {
                    self.reindex();
                }
            }
        }
    }

    /// Removes every chunk of `source_id`; returns how many were removed.
    pub fn remove_source(&mut self, source_id: &str) -> Result<usize> {
        let before = self.entries.len();
        if !self.entries.iter().any(|e| e.chunk.source_id == source_id) {
            return Ok(0);
        }
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalOp::RemoveSource {
                source_id: source_id.to_string(),
            })?;
        }
        self.drop_source(source_id);
        Ok(before - self.entries.len())
    }

    pub(super) fn drop_source(&mut self, source_id: &str) {
        self.entries.retain(|e| e.chunk.source_id != source_id);
        self.reindex();
    }

    pub(super) fn remove_span(&mut self, source_id: &str, span: (usize, usize)) -> Result<bool> {
        let key = (source_id.to_string(), span.0, span.1);
        if !self.by_span.contains_key(&key) {
            return Ok(false);
        }
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalOp::RemoveSpan {
                source_id: source_id.to_string(),
                span,
            })?;
        }
        self.drop_span(source_id, span);
        Ok(true)
    }

    pub(super) fn drop_span(&mut self, source_id: &str, span: (usize, usize)) {
        self.entries
            .retain(|e| !(e.chunk.source_id == source_id && e.chunk.span == span));
        self.reindex();
    }

    fn reindex(&mut self) {
        self.by_span = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (span_key(&e.chunk), i))
            .collect();
    }

    pub(super) fn next_id(&self) -> u64 {
        self.next_id
    }

    pub(super) fn restore(dim: Option<usize>, next_id: u64, entries: Vec<StoredChunk>) -> Self {
        let mut store = Self {
            dim,
            entries,
            next_id,
            ..Self::default()
        };
        store.entries.sort_by_key(|e| e.id);
        store.reindex();
        store
    }

    pub fn query(&self, embedder: &dyn Embedder, q: &str, k: usize, threshold: f64) -> Result<Vec<RetrievalHit>> {
        self.query_filtered(embedder, q, k, threshold, &QueryFilter::default())
    }

    pub fn query_filtered(
        &self,
        embedder: &dyn Embedder,
        q: &str,
        k: usize,
        threshold: f64,
        filter: &QueryFilter,
    ) -> Result<Vec<RetrievalHit>> {
        if k == 0 {
            return Err(VectorStoreError::InvalidK);
        }
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let mut vectors = embedder
            .embed(&[q.to_string()])
            .map_err(VectorStoreError::QueryEmbedding)?;
        check_embeddings(1, self.dim, &vectors).map_err(VectorStoreError::QueryEmbedding)?;
        let v = vectors.pop().expect("one vector");
        self.rank_vector(&v, k, threshold, filter)
    }

    /// Top-k by cosine among admitted chunks with similarity >= threshold,
    /// ordered by similarity descending then chunk id ascending.
    pub fn rank_vector(
        &self,
        query: &EmbeddingVector,
        k: usize,
        threshold: f64,
        filter: &QueryFilter,
    ) -> Result<Vec<RetrievalHit>> {
        if k == 0 {
            return Err(VectorStoreError::InvalidK);
        }
        if let Some(d) = self.dim {
            if d != query.dim() {
                return Err(VectorStoreError::DimensionMismatch {
                    expected: d,
                    actual: query.dim(),
                });
            }
        }
        let query_norm = query.norm();
        let mut scored: Vec<(ChunkId, f64)> = self
            .entries
            .iter()
            .filter(|e| filter.admits(&e.chunk))
            .map(|e| (e.id, cosine_with_norm(query, query_norm, &e.vector)))
            .filter(|(_, s)| *s >= threshold)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (chunk_id, similarity))| RetrievalHit {
                chunk_id,
                similarity,
                rank: i + 1,
            })
            .collect())
    }
}

fn cosine_with_norm(query: &EmbeddingVector, query_norm: f64, stored: &EmbeddingVector) -> f64 {
    let denom = query_norm * stored.norm();
    if denom == 0.0 {
        return 0.0;
    }
    let dot: f64 = query
        .values()
        .iter()
        .zip(stored.values())
        .map(|(a, b)| a * b)
        .sum();
    (dot / denom).clamp(-1.0, 1.0)
}

/// Embeds all texts; if the batch fails, re-embeds one by one to name the
/// first failing index.
pub(crate) fn embed_all(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    let checked = embedder
        .embed(texts)
        .and_then(|v| check_embeddings(texts.len(), embedder.dim(), &v).map(|()| v));
    match checked {
        Ok(v) => Ok(v),
        Err(batch_error) => {
            for (index, text) in texts.iter().enumerate() {
                if let Err(source) = embedder.embed(std::slice::from_ref(text)) {
                    return Err(VectorStoreError::Embedding { index, source });
                }
            }
            Err(VectorStoreError::Embedding {
                index: 0,
                source: batch_error,
            })
        }
    }
}
