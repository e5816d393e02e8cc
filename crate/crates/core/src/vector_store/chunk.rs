use serde::{Deserialize, Serialize};

use super::{ChunkKind, VectorStoreError};
use crate::text::{char_len, char_slice};

/// Sliding-window chunking parameters, in characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPolicy {
    chunk_size: usize,
    overlap: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            chunk_size: 400,
            overlap: 100,
        }
    }
}

impl ChunkPolicy {
    pub fn new(chunk_size: usize, overlap: usize) -> Result<Self, VectorStoreError> {
        if chunk_size == 0 || overlap >= chunk_size {
            return Err(VectorStoreError::InvalidPolicy {
                chunk_size,
                overlap,
            });
        }
        Ok(Self {
            chunk_size,
            overlap,
        })
    }

    pub fn chunk_size(&self) -> usize {
        self.chunk_size
    }

    pub fn overlap(&self) -> usize {
        self.overlap
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

/// A chunk before it is stored. `span` is in characters, end-exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub source_id: String,
    pub kind: ChunkKind,
    pub text: String,
    pub span: (usize, usize),
}

impl Chunk {
    /// A chunk covering all of `text`.
    pub fn whole(source_id: impl Into<String>, kind: ChunkKind, text: impl Into<String>) -> Self {
        let text = text.into();
        let len = char_len(&text);
        Self {
            source_id: source_id.into(),
            kind,
            text,
            span: (0, len),
        }
    }
}

/// Splits `doc` into windows starting at every multiple of the stride below the
/// document length. The last window may be short; empty input yields nothing.
pub fn chunk_document(
    source_id: &str,
    kind: ChunkKind,
    doc: &str,
    policy: ChunkPolicy,
) -> Vec<Chunk> {
    let len = char_len(doc);
    (0..len)
        .step_by(policy.stride())
        .map(|start| {
            let end = (start + policy.chunk_size).min(len);
            Chunk {
                source_id: source_id.to_string(),
                kind,
                text: char_slice(doc, start, end).to_string(),
                span: (start, end),
            }
        })
        .collect()
}

/// Inverse of [`chunk_document`]: drops the leading `overlap` characters of
/// every chunk after the first and concatenates.
pub fn reconstruct(chunks: &[Chunk], overlap: usize) -> String {
    let mut out = String::new();
    for (i, chunk) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(&chunk.text);
        } else {
            let len = char_len(&chunk.text);
            out.push_str(char_slice(&chunk.text, overlap.min(len), len));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn policy(size: usize, overlap: usize) -> ChunkPolicy {
        ChunkPolicy::new(size, overlap).unwrap()
    }

    /// Independent enumeration: a window starts at s while s < len, s += stride.
    fn sliding_window_starts(len: usize, stride: usize) -> Vec<usize> {
        let mut starts = Vec::new();
        let mut s = 0;
        while s < len {
            starts.push(s);
            s += stride;
        }
        starts
    }

    #[test]
    fn empty_doc_gives_no_chunks() {
        assert!(chunk_document("d", ChunkKind::Textbook, "", policy(400, 100)).is_empty());
    }

    #[test]
    fn short_doc_single_chunk() {
        let doc = "a".repeat(300);
        let chunks = chunk_document("d", ChunkKind::Textbook, &doc, policy(400, 100));
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].span, (0, 300));
    }

    #[test]
    fn thousand_chars_stride_300() {
        let doc: String = (0..1000).map(|i| char::from(b'a' + (i % 26) as u8)).collect();
        let chunks = chunk_document("d", ChunkKind::Textbook, &doc, policy(400, 100));
        let starts: Vec<_> = chunks.iter().map(|c| c.span.0).collect();
        assert_eq!(starts, sliding_window_starts(1000, 300));
        assert_eq!(starts, vec![0, 300, 600, 900]);
        assert_eq!(chunks[3].span, (900, 1000));
    }

    #[test]
    fn invalid_policies() {
        assert!(ChunkPolicy::new(100, 100).is_err());
        assert!(ChunkPolicy::new(0, 0).is_err());
        assert!(ChunkPolicy::new(100, 99).is_ok());
    }

    #[test]
    fn multibyte_spans_are_characters() {
        let doc = "ü".repeat(10);
        let chunks = chunk_document("d", ChunkKind::Textbook, &doc, policy(4, 1));
        assert_eq!(chunks[0].text, "üüüü");
        assert_eq!(reconstruct(&chunks, 1), doc);
    }

    proptest! {
        #[test]
        fn reconstructs_any_doc(doc in "\\PC{0,600}", size in 2usize..120, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size - 1) as f64 * overlap_frac) as usize;
            let p = policy(size, overlap);
            let chunks = chunk_document("d", ChunkKind::Textbook, &doc, p);
            prop_assert_eq!(reconstruct(&chunks, overlap), doc.clone());
            for c in &chunks {
                prop_assert!(c.span.1 > c.span.0);
                prop_assert_eq!(char_slice(&doc, c.span.0, c.span.1), c.text.as_str());
            }
        }
    }
}
