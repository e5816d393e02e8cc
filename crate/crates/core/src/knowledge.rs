//! Everything a consultation reads: the vector store (textbooks, dialogues,
//! sensor windows), guideline library, symptom table, incidence table, sensor
//! records and the optional retrieval filter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consultation::IncidenceTable;
use crate::gateway::Embedder;
use crate::guideline::{GuidelineError, GuidelineLibrary, SymptomDiseaseTable};
use crate::sensor::{parse_csv, parse_jsonl, FilterModel, IngestReport, RawRecord, SensorError, SensorStore};
use crate::vector_store::{
    reconstruct, ChunkKind, ChunkPolicy, QueryFilter, SourceDocument, SyncEvent, SyncReport, TimeWindow,
    VectorStore, VectorStoreError,
};

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Store(#[from] VectorStoreError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where sources live. Relative paths are resolved by the config loader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnowledgeSources {
    pub guidelines: Option<PathBuf>,
    pub symptom_table: Option<PathBuf>,
    pub incidence: Option<PathBuf>,
    pub textbooks: Option<PathBuf>,
    pub dialogues: Option<PathBuf>,
    pub sensors: Option<PathBuf>,
    pub filter_model: Option<PathBuf>,
    /// Journaled vector store directory; in-memory when absent.
    pub store_dir: Option<PathBuf>,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
}

impl Default for KnowledgeSources {
    fn default() -> Self {
        Self {
            guidelines: None,
            symptom_table: None,
            incidence: None,
            textbooks: None,
            dialogues: None,
            sensors: None,
            filter_model: None,
            store_dir: None,
            chunk_size: 400,
            chunk_overlap: 100,
        }
    }
}

impl KnowledgeSources {
    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.guidelines,
            &mut self.symptom_table,
            &mut self.incidence,
            &mut self.textbooks,
            &mut self.dialogues,
            &mut self.sensors,
            &mut self.filter_model,
            &mut self.store_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn chunk_policy(&self) -> Result<ChunkPolicy, KnowledgeError> {
        Ok(ChunkPolicy::new(self.chunk_size, self.chunk_overlap)?)
    }
}

#[derive(Debug, Deserialize)]
struct DocumentLine {
    source_id: String,
    kind: Option<ChunkKind>,
    text: String,
}

fn kind_prefix(kind: ChunkKind) -> &'static str {
    match kind {
        ChunkKind::Textbook => "textbook",
        ChunkKind::Dialogue => "dialogue",
        ChunkKind::Sensor => "sensor",
        ChunkKind::GuidelineAux => "guideline",
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, KnowledgeError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    Ok(paths)
}

/// Reads `.txt`/`.md` files (one document each, id `<kind>/<stem>`) and
/// `.jsonl` files of `{source_id, kind?, text}` from a file or directory.
pub fn read_documents(path: &Path, kind: ChunkKind) -> Result<Vec<SourceDocument>, KnowledgeError> {
    let files = if path.is_dir() { sorted_files(path)? } else { vec![path.to_path_buf()] };
    let mut docs = Vec::new();
    for f in files {
        let ext = f.extension().and_then(|x| x.to_str()).unwrap_or_default();
        let text = || fs::read_to_string(&f).map_err(io_err(&f));
        match ext {
            "txt" | "md" => {
                let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                docs.push(SourceDocument {
                    source_id: format!("{}/{stem}", kind_prefix(kind)),
                    kind,
                    text: text()?,
                });
            }
            "jsonl" => {
                for (i, line) in text()?.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let d: DocumentLine = serde_json::from_str(line).map_err(|e| KnowledgeError::Format {
                        path: f.display().to_string(),
                        message: format!("line {}: {e}", i + 1),
                    })?;
                    docs.push(SourceDocument {
                        source_id: d.source_id,
                        kind: d.kind.unwrap_or(kind),
                        text: d.text,
                    });
                }
            }
            _ => {}
        }
    }
    docs.retain(|d| !d.text.trim().is_empty());
    Ok(docs)
}

/// A retrieved passage, whole document for demonstrations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub source_id: String,
    pub similarity: f64,
    pub text: String,
}

#[derive(Debug, Default)]
pub struct KnowledgeBase {
    pub store: VectorStore,
    pub library: GuidelineLibrary,
    pub symptoms: SymptomDiseaseTable,
    pub incidence: IncidenceTable,
    pub sensors: SensorStore,
    pub filter: Option<FilterModel>,
    pub chunk_policy: ChunkPolicy,
}

impl KnowledgeBase {
    pub fn new(chunk_policy: ChunkPolicy) -> Self {
        Self {
            chunk_policy,
            ..Self::default()
        }
    }

    pub fn load(sources: &KnowledgeSources, embedder: &dyn Embedder) -> Result<Self, KnowledgeError> {
        let mut kb = Self::new(sources.chunk_policy()?);
        if let Some(dir) = &sources.store_dir {
            kb.store = VectorStore::open(dir)?;
        }
        if let Some(p) = &sources.guidelines {
            kb.library = GuidelineLibrary::load_dir(p)?;
        }
        if let Some(p) = &sources.symptom_table {
            kb.symptoms = SymptomDiseaseTable::load(p, embedder)?;
        }
        if let Some(p) = &sources.incidence {
            kb.incidence = IncidenceTable::load(p).map_err(|e| KnowledgeError::Format {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
        }
        let mut docs = Vec::new();
        if let Some(p) = &sources.textbooks {
            docs.extend(read_documents(p, ChunkKind::Textbook)?);
        }
        if let Some(p) = &sources.dialogues {
            docs.extend(read_documents(p, ChunkKind::Dialogue)?);
        }
        if !docs.is_empty() {
            kb.add_documents(docs, embedder)?;
        }
        if let Some(p) = &sources.sensors {
            let files = if p.is_dir() { sorted_files(p)? } else { vec![p.clone()] };
            for f in files {
                if f.extension().is_some_and(|x| x == "csv" || x == "jsonl") {
                    kb.ingest_sensor_file(&f, embedder)?;
                }
            }
        }
        if let Some(p) = &sources.filter_model {
            kb.filter = Some(FilterModel::load(p)?);
        }
        Ok(kb)
    }

    /// Chunks and embeds `docs`, replacing earlier versions by source id.
    pub fn add_documents(&mut self, docs: Vec<SourceDocument>, embedder: &dyn Embedder) -> Result<SyncReport, KnowledgeError> {
        self.sync(&SyncEvent::MedicalUpdate { documents: docs }, embedder)
    }

    pub fn sync(&mut self, event: &SyncEvent, embedder: &dyn Embedder) -> Result<SyncReport, KnowledgeError> {
        Ok(self.store.synchronize(event, self.chunk_policy, embedder, &self.sensors)?)
    }

    /// Re-serializes and re-embeds every window of one patient.
    pub fn sync_patient_sensors(&mut self, patient_id: &str, embedder: &dyn Embedder) -> Result<SyncReport, KnowledgeError> {
        let mut times = self.sensors.records_of(patient_id).map(|r| r.timestamp);
        let Some(first) = times.next() else {
            return Ok(SyncReport::default());
        };
        let (start, end) = times.fold((first, first), |(a, b), t| (a.min(t), b.max(t)));
        let window = TimeWindow {
            start,
            end: end + chrono::Duration::hours(1),
        };
        self.sync(
            &SyncEvent::SensorHourly {
                patient_id: patient_id.to_string(),
                window,
            },
            embedder,
        )
    }

    /// Ingests rows, then re-syncs every patient they name, since baselines
    /// of the whole series may move.
    pub fn ingest_sensor_rows(
        &mut self,
        rows: Vec<(usize, Result<RawRecord, String>)>,
        embedder: &dyn Embedder,
    ) -> Result<IngestReport, KnowledgeError> {
        let patients: Vec<String> = rows
            .iter()
            .filter_map(|(_, r)| r.as_ref().ok().map(|r| r.patient_id.trim().to_string()))
            .collect();
        let report = self.sensors.ingest(rows);
        let mut done: Vec<&str> = Vec::new();
        for p in &patients {
            if !done.contains(&p.as_str()) {
                done.push(p);
                self.sync_patient_sensors(p, embedder)?;
            }
        }
        Ok(report)
    }

    /// Ingests one patient's batch; rows naming another patient are rejected.
    pub fn ingest_patient_records(
        &mut self,
        patient_id: &str,
        records: Vec<RawRecord>,
        embedder: &dyn Embedder,
    ) -> Result<IngestReport, KnowledgeError> {
        let report = self.sensors.ingest_records(patient_id, records);
        if report.accepted > 0 {
            self.sync_patient_sensors(patient_id, embedder)?;
        }
        Ok(report)
    }

    pub fn ingest_sensor_file(&mut self, path: &Path, embedder: &dyn Embedder) -> Result<IngestReport, KnowledgeError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let rows = if path.extension().is_some_and(|x| x == "csv") {
            parse_csv(&text)?
        } else {
            parse_jsonl(&text)
        };
        self.ingest_sensor_rows(rows, embedder)
    }

    /// Rebuilds a whole document from its stored chunks.
    pub fn document_text(&self, source_id: &str) -> Option<String> {
        let mut chunks: Vec<_> = self.store.chunks_of(source_id).map(|s| s.chunk.clone()).collect();
        if chunks.is_empty() {
            return None;
        }
        chunks.sort_by_key(|c| c.span.0);
        Some(reconstruct(&chunks, self.chunk_policy.overlap()))
    }

    /// Top-`k` distinct dialogue documents by their best chunk.
    pub fn dialogue_demonstrations(
        &self,
        embedder: &dyn Embedder,
        sym: &str,
        k: usize,
        threshold: f64,
    ) -> Result<Vec<Passage>, KnowledgeError> {
        let n = self.store.count_kind(ChunkKind::Dialogue);
        if n == 0 || k == 0 {
            return Ok(Vec::new());
        }
        let hits = self
            .store
            .query_filtered(embedder, sym, n, threshold, &QueryFilter::kind(ChunkKind::Dialogue))?;
        let mut out: Vec<Passage> = Vec::new();
        for h in hits {
            let Some(stored) = self.store.get(h.chunk_id) else { continue };
            let source = &stored.chunk.source_id;
            if out.iter().any(|p| &p.source_id == source) {
                continue;
            }
            if let Some(text) = self.document_text(source) {
                out.push(Passage {
                    source_id: source.clone(),
                    similarity: h.similarity,
                    text,
                });
            }
            if out.len() == k {
                break;
            }
        }
        Ok(out)
    }

    /// Top-`k` textbook chunks above `threshold`.
    pub fn medical_knowledge(
        &self,
        embedder: &dyn Embedder,
        sym: &str,
        k: usize,
        threshold: f64,
    ) -> Result<Vec<Passage>, KnowledgeError> {
        if k == 0 || sym.trim().is_empty() {
            return Ok(Vec::new());
        }
        let hits = self
            .store
            .query_filtered(embedder, sym, k, threshold, &QueryFilter::kind(ChunkKind::Textbook))?;
        Ok(hits
            .into_iter()
            .filter_map(|h| {
                self.store.get(h.chunk_id).map(|s| Passage {
                    source_id: s.chunk.source_id.clone(),
                    similarity: h.similarity,
                    text: s.chunk.text.clone(),
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::HashEmbedder;

    fn dialogues(n: usize) -> Vec<SourceDocument> {
        let topics = [
            "stomach pain after meals and burning",
            "cough with phlegm and chest tightness",
            "palpitations weight loss and heat intolerance",
            "headache behind the eyes with light sensitivity",
            "itchy rash on both arms",
            "sore throat and fever for two days",
            "joint pain in the knees every morning",
            "frequent urination and thirst",
            "dizziness when standing up quickly",
            "lower back pain after lifting",
        ];
        (0..n)
            .map(|i| SourceDocument {
                source_id: format!("dialogue/d{i}"),
                kind: ChunkKind::Dialogue,
                text: format!("Patient: I have {}. Doctor: How long has it lasted?", topics[i % topics.len()]),
            })
            .collect()
    }

    #[test]
    fn demonstrations_are_brute_force_top3() {
        let e = HashEmbedder::default();
        let mut kb = KnowledgeBase::new(ChunkPolicy::default());
        let docs = dialogues(10);
        kb.add_documents(docs.clone(), &e).unwrap();
        let sym = "I get stomach pain and burning after meals, and palpitations";
        let got = kb.dialogue_demonstrations(&e, sym, 3, -1.0).unwrap();
        let q = e.embed_one(sym);
        let mut oracle: Vec<(f64, usize)> = docs
            .iter()
            .enumerate()
            .map(|(i, d)| (q.cosine(&e.embed_one(&d.text)), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expected: Vec<String> = oracle[..3].iter().map(|(_, i)| docs[*i].source_id.clone()).collect();
        assert_eq!(got.iter().map(|p| p.source_id.clone()).collect::<Vec<_>>(), expected);
        assert_eq!(got[0].text, docs[oracle[0].1].text);
    }

    #[test]
    fn long_dialogue_reconstructs_from_chunks() {
        let e = HashEmbedder::default();
        let mut kb = KnowledgeBase::new(ChunkPolicy::new(100, 20).unwrap());
        let text: String = (0..40).map(|i| format!("Patient line {i} about cough. ")).collect();
        kb.add_documents(
            vec![SourceDocument {
                source_id: "dialogue/long".into(),
                kind: ChunkKind::Dialogue,
                text: text.clone(),
            }],
            &e,
        )
        .unwrap();
        let got = kb.dialogue_demonstrations(&e, "cough", 3, -1.0).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].text, text);
    }

    #[test]
    fn sensor_ingest_syncs_windows() {
        let e = HashEmbedder::default();
        let mut kb = KnowledgeBase::new(ChunkPolicy::default());
        let recs = (0..3)
            .map(|i| RawRecord {
                patient_id: "p".into(),
                metric: "heart_rate_bpm".into(),
                timestamp: format!("2024-03-01T0{i}:00:00Z"),
                value: "70".into(),
                units: None,
            })
            .collect();
        let r = kb.ingest_patient_records("p", recs, &e).unwrap();
        assert_eq!(r.accepted, 3);
        assert_eq!(kb.store.count_kind(ChunkKind::Sensor), 3);
    }
}
