use std::collections::BTreeSet;
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::persist::JournalOp;
use super::store::embed_all;
use super::{chunk_document, Chunk, ChunkId, ChunkKind, ChunkPolicy, Result, StoredChunk, VectorStore, VectorStoreError};
use crate::gateway::Embedder;

/// Half-open time interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeWindow {
    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.start <= t && t < self.end
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub source_id: String,
    pub kind: ChunkKind,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyncEvent {
    SensorHourly {
        patient_id: String,
        window: TimeWindow,
    },
    MedicalUpdate {
        documents: Vec<SourceDocument>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub added: usize,
    pub replaced: usize,
    pub removed: usize,
    pub elapsed_ms: u64,
}

/// Resolves a sensor window into serialized documents, one per metric-hour.
pub trait SensorWindowSource {
    fn window_documents(
        &self,
        patient_id: &str,
        window: &TimeWindow,
    ) -> std::result::Result<Vec<SourceDocument>, String>;
}

/// For stores without sensor data.
impl SensorWindowSource for () {
    fn window_documents(&self, patient_id: &str, _window: &TimeWindow) -> std::result::Result<Vec<SourceDocument>, String> {
        Err(format!("no sensor source configured for patient {patient_id}"))
    }
}

impl VectorStore {
    /// Re-embeds only the documents named by `event`.
    ///
    /// New chunks of a document pair up positionally with its existing chunks:
    /// paired chunks are replaced in place (same id), surplus new chunks are
    /// added and surplus old chunks removed. Nothing is mutated unless every
    /// document resolves and embeds.
    pub fn synchronize(
        &mut self,
        event: &SyncEvent,
        policy: ChunkPolicy,
        embedder: &dyn Embedder,
        sensors: &dyn SensorWindowSource,
    ) -> Result<SyncReport> {
        let started = Instant::now();
        let documents = match event {
            SyncEvent::SensorHourly { patient_id, window } => {
                if window.is_empty() {
                    return Ok(SyncReport::default());
                }
                sensors
                    .window_documents(patient_id, window)
                    .map_err(VectorStoreError::Unresolvable)?
            }
            SyncEvent::MedicalUpdate { documents } => {
                if documents.is_empty() {
                    return Err(VectorStoreError::Unresolvable(
                        "medical-update event carries no documents".into(),
                    ));
                }
                documents.clone()
            }
        };
        let mut seen = BTreeSet::new();
        for doc in &documents {
            if doc.source_id.trim().is_empty() {
                return Err(VectorStoreError::Unresolvable("document without source_id".into()));
            }
            if !seen.insert(doc.source_id.as_str()) {
                return Err(VectorStoreError::Unresolvable(format!(
                    "duplicate document {}",
                    doc.source_id
                )));
            }
        }

        let per_doc: Vec<Vec<Chunk>> = documents
            .iter()
            .map(|doc| match doc.kind {
                ChunkKind::Sensor if !doc.text.is_empty() => {
                    vec![Chunk::whole(&doc.source_id, doc.kind, &doc.text)]
                }
                _ => chunk_document(&doc.source_id, doc.kind, &doc.text, policy),
            })
            .collect();
        let texts: Vec<String> = per_doc
            .iter()
            .flatten()
            .map(|c| c.text.clone())
            .collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embed_all(embedder, &texts)?
        };
        if let Some(d) = self.dim() {
            if let Some(v) = vectors.iter().find(|v| v.dim() != d) {
                return Err(VectorStoreError::DimensionMismatch {
                    expected: d,
                    actual: v.dim(),
                });
            }
        }
        let mut vectors = vectors.into_iter();

        let mut report = SyncReport::default();
        for (doc, chunks) in documents.iter().zip(per_doc) {
            let old: Vec<(ChunkId, (usize, usize))> = self
                .chunks_of(&doc.source_id)
                .map(|e| (e.id, e.chunk.span))
                .collect();
            for (_, span) in old.iter().skip(chunks.len()) {
                self.remove_span(&doc.source_id, *span)?;
                report.removed += 1;
            }
            let mut fresh = Vec::new();
            for (i, chunk) in chunks.into_iter().enumerate() {
                let vector = vectors.next().expect("one vector per chunk");
                match old.get(i) {
                    Some((id, _)) => {
                        self.replace_by_id(*id, chunk, vector)?;
                        report.replaced += 1;
                    }
                    None => fresh.push((chunk, vector)),
                }
            }
            report.added += fresh.len();
            self.upsert_embedded(fresh)?;
        }
        report.elapsed_ms = u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX);
        Ok(report)
    }

    fn replace_by_id(&mut self, id: ChunkId, chunk: Chunk, vector: super::EmbeddingVector) -> Result<()> {
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalOp::Upsert {
                id,
                chunk: chunk.clone(),
                vector: vector.clone(),
            })?;
        }
        self.put(StoredChunk { id, chunk, vector });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{FailingEmbedder, HashEmbedder};

    fn doc(id: &str, text: &str) -> SourceDocument {
        SourceDocument {
            source_id: id.into(),
            kind: ChunkKind::Textbook,
            text: text.into(),
        }
    }

    fn words(n: usize, salt: &str) -> String {
        (0..n).map(|i| format!("{salt}{i} ")).collect()
    }

    struct Windows(Vec<SourceDocument>);
    impl SensorWindowSource for Windows {
        fn window_documents(&self, _p: &str, _w: &TimeWindow) -> std::result::Result<Vec<SourceDocument>, String> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn new_document_counts_as_added() {
        let policy = ChunkPolicy::default();
        let text = words(200, "w");
        let expected = chunk_document("d", ChunkKind::Textbook, &text, policy).len();
        let mut s = VectorStore::new();
        let report = s
            .synchronize(
                &SyncEvent::MedicalUpdate { documents: vec![doc("d", &text)] },
                policy,
                &HashEmbedder::default(),
                &(),
            )
            .unwrap();
        assert_eq!(report.added, expected);
        assert_eq!(report.replaced, 0);
    }

    #[test]
    fn replacing_document_replaces_old_chunk_count() {
        let policy = ChunkPolicy::default();
        let e = HashEmbedder::default();
        let old_text = words(150, "a");
        let new_text = words(150, "b");
        let old_count = chunk_document("d", ChunkKind::Textbook, &old_text, policy).len();
        let new_count = chunk_document("d", ChunkKind::Textbook, &new_text, policy).len();
        let mut s = VectorStore::new();
        let ev = |t: &str| SyncEvent::MedicalUpdate { documents: vec![doc("d", t)] };
        s.synchronize(&ev(&old_text), policy, &e, &()).unwrap();
        let report = s.synchronize(&ev(&new_text), policy, &e, &()).unwrap();
        assert_eq!(report.replaced, old_count.min(new_count));
        assert_eq!(report.replaced, old_count);
        assert_eq!(report.added, new_count - old_count);
        assert_eq!(s.len(), new_count);
    }

    #[test]
    fn shrinking_document_removes_surplus() {
        let policy = ChunkPolicy::new(50, 10).unwrap();
        let e = HashEmbedder::default();
        let mut s = VectorStore::new();
        let ev = |t: String| SyncEvent::MedicalUpdate { documents: vec![doc("d", &t)] };
        s.synchronize(&ev(words(100, "x")), policy, &e, &()).unwrap();
        let before = s.len();
        let report = s.synchronize(&ev(words(10, "y")), policy, &e, &()).unwrap();
        let after = chunk_document("d", ChunkKind::Textbook, &words(10, "y"), policy).len();
        assert_eq!(report.replaced, after);
        assert_eq!(report.removed, before - after);
    }

    #[test]
    fn sync_leaves_other_sources_untouched() {
        let policy = ChunkPolicy::default();
        let e = HashEmbedder::default();
        let mut s = VectorStore::new();
        s.synchronize(
            &SyncEvent::MedicalUpdate { documents: vec![doc("keep", &words(120, "k")), doc("edit", &words(50, "e"))] },
            policy,
            &e,
            &(),
        )
        .unwrap();
        let snapshot: Vec<_> = s.chunks_of("keep").cloned().collect();
        s.synchronize(&SyncEvent::MedicalUpdate { documents: vec![doc("edit", &words(80, "f"))] }, policy, &e, &())
            .unwrap();
        let now: Vec<_> = s.chunks_of("keep").cloned().collect();
        assert_eq!(snapshot, now);
    }

    #[test]
    fn empty_sensor_window_is_noop() {
        let t = Utc::now();
        let mut s = VectorStore::new();
        let report = s
            .synchronize(
                &SyncEvent::SensorHourly { patient_id: "p".into(), window: TimeWindow { start: t, end: t } },
                ChunkPolicy::default(),
                &HashEmbedder::default(),
                &(),
            )
            .unwrap();
        assert_eq!((report.added, report.replaced), (0, 0));
    }

    #[test]
    fn sensor_window_with_no_records_adds_nothing() {
        let t = Utc::now();
        let mut s = VectorStore::new();
        let report = s
            .synchronize(
                &SyncEvent::SensorHourly {
                    patient_id: "p".into(),
                    window: TimeWindow { start: t, end: t + chrono::Duration::hours(1) },
                },
                ChunkPolicy::default(),
                &HashEmbedder::default(),
                &Windows(vec![]),
            )
            .unwrap();
        assert_eq!((report.added, report.replaced), (0, 0));
    }

    #[test]
    fn sensor_window_text_change_replaces_in_place() {
        let t = Utc::now();
        let e = HashEmbedder::default();
        let ev = SyncEvent::SensorHourly {
            patient_id: "p".into(),
            window: TimeWindow { start: t, end: t + chrono::Duration::hours(1) },
        };
        let sensor_doc = |text: &str| SourceDocument {
            source_id: "sensor:p:heart_rate_bpm:x".into(),
            kind: ChunkKind::Sensor,
            text: text.into(),
        };
        let mut s = VectorStore::new();
        s.synchronize(&ev, ChunkPolicy::default(), &e, &Windows(vec![sensor_doc("mean 70")])).unwrap();
        let r = s
            .synchronize(&ev, ChunkPolicy::default(), &e, &Windows(vec![sensor_doc("mean heart rate 72 bpm")]))
            .unwrap();
        assert_eq!((r.added, r.replaced, r.removed), (0, 1, 0));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn failed_embedding_mutates_nothing() {
        let mut s = VectorStore::new();
        let err = s.synchronize(
            &SyncEvent::MedicalUpdate { documents: vec![doc("d", "text")] },
            ChunkPolicy::default(),
            &FailingEmbedder,
            &(),
        );
        assert!(err.is_err());
        assert!(s.is_empty());
    }

    #[test]
    fn unresolvable_payloads() {
        let mut s = VectorStore::new();
        let e = HashEmbedder::default();
        assert!(matches!(
            s.synchronize(&SyncEvent::MedicalUpdate { documents: vec![] }, ChunkPolicy::default(), &e, &()),
            Err(VectorStoreError::Unresolvable(_))
        ));
        let t = Utc::now();
        assert!(matches!(
            s.synchronize(
                &SyncEvent::SensorHourly {
                    patient_id: "p".into(),
                    window: TimeWindow { start: t, end: t + chrono::Duration::hours(1) }
                },
                ChunkPolicy::default(),
                &e,
                &()
            ),
            Err(VectorStoreError::Unresolvable(_))
        ));
    }

    #[test]
    fn event_json_shape() {
        let json = r#"{"kind":"medical-update","documents":[{"source_id":"gerd","kind":"textbook","text":"x"}]}"#;
        let ev: SyncEvent = serde_json::from_str(json).unwrap();
        assert!(matches!(ev, SyncEvent::MedicalUpdate { ref documents } if documents.len() == 1));
    }
}
