use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::dsl::GuidelineTree;
use super::GuidelineError;
use crate::gateway::{check_embeddings, Embedder};
use crate::text::normalize_key;
use crate::vector_store::{chunk_document, ChunkKind, ChunkPolicy, EmbeddingVector, QueryFilter, VectorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseCandidateSeed {
    pub disease: String,
    pub symptom_similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedScoring {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomEntry {
    pub symptom: String,
    pub diseases: Vec<String>,
}

/// Symptom statements with pre-computed embeddings.
#[derive(Debug, Clone, Default)]
pub struct SymptomDiseaseTable {
    entries: Vec<SymptomEntry>,
    vectors: Vec<EmbeddingVector>,
}

impl SymptomDiseaseTable {
    pub fn build(entries: Vec<SymptomEntry>, embedder: &dyn Embedder) -> Result<Self, GuidelineError> {
        if entries.is_empty() {
            return Ok(Self::default());
        }
        let texts: Vec<String> = entries.iter().map(|e| e.symptom.clone()).collect();
        let vectors = embedder.embed(&texts).map_err(GuidelineError::Embedding)?;
        check_embeddings(texts.len(), embedder.dim(), &vectors).map_err(GuidelineError::Embedding)?;
        Ok(Self { entries, vectors })
    }

    /// Parses JSON-lines `{"symptom": .., "diseases": [..]}`; blank lines skipped.
    pub fn parse_jsonl(text: &str) -> Result<Vec<SymptomEntry>, GuidelineError> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: SymptomEntry = serde_json::from_str(line).map_err(|e| GuidelineError::Syntax {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            out.push(entry);
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>, embedder: &dyn Embedder) -> Result<Self, GuidelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GuidelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::build(Self::parse_jsonl(&text)?, embedder)
    }

    pub fn entries(&self) -> &[SymptomEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Top-k entries by cosine, their labels unioned, diseases scored by the
    /// max (or mean) similarity of contributing entries, top-k diseases kept.
    /// Ties order by entry index, then disease name.
    pub fn map_symptoms(
        &self,
        embedder: &dyn Embedder,
        sym: &str,
        k: usize,
        scoring: SeedScoring,
    ) -> Result<Vec<DiseaseCandidateSeed>, GuidelineError> {
        if self.entries.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        let mut qs = embedder.embed(&[sym.to_string()]).map_err(GuidelineError::Embedding)?;
        check_embeddings(1, Some(self.vectors[0].dim()), &qs).map_err(GuidelineError::Embedding)?;
        let q = qs.pop().expect("one vector");
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, q.cosine(v).clamp(0.0, 1.0)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);

        let mut by_disease: BTreeMap<String, (String, Vec<f64>)> = BTreeMap::new();
        for (i, sim) in scored {
            for d in &self.entries[i].diseases {
                by_disease
                    .entry(normalize_key(d))
                    .or_insert_with(|| (d.trim().to_string(), Vec::new()))
                    .1
                    .push(sim);
            }
        }
        let mut seeds: Vec<DiseaseCandidateSeed> = by_disease
            .into_values()
            .map(|(disease, sims)| {
                let symptom_similarity = match scoring {
                    SeedScoring::Max => sims.iter().copied().fold(0.0, f64::max),
                    SeedScoring::Mean => sims.iter().sum::<f64>() / sims.len() as f64,
                };
                DiseaseCandidateSeed {
                    disease,
                    symptom_similarity,
                }
            })
            .collect();
        seeds.sort_by(|a, b| {
            b.symptom_similarity
                .total_cmp(&a.symptom_similarity)
                .then_with(|| normalize_key(&a.disease).cmp(&normalize_key(&b.disease)))
        });
        seeds.truncate(k);
        Ok(seeds)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GuidelineRetrieval {
    #[serde(skip)]
    pub trees: Vec<Arc<GuidelineTree>>,
    /// Seed diseases with no tree in the library.
    pub missing: Vec<String>,
}

/// Trees keyed by normalized disease name.
#[derive(Debug, Clone, Default)]
pub struct GuidelineLibrary {
    trees: BTreeMap<String, Arc<GuidelineTree>>,
}

impl GuidelineLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tree: GuidelineTree) -> Option<Arc<GuidelineTree>> {
        self.trees.insert(normalize_key(tree.disease()), Arc::new(tree))
    }

    /// Loads every `*.tree` / `*.json` file in `dir`. Any invalid file fails
    /// the whole load, naming the file.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, GuidelineError> {
        let dir = dir.as_ref();
        let io = |source| GuidelineError::Io {
            path: dir.display().to_string(),
            source,
        };
        let mut paths: Vec<_> = fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tree" || x == "json"))
            .collect();
        paths.sort();
        let mut lib = Self::new();
        for p in paths {
            let text = fs::read_to_string(&p).map_err(|source| GuidelineError::Io {
                path: p.display().to_string(),
                source,
            })?;
            let tree = GuidelineTree::parse(&text).map_err(|e| GuidelineError::InFile {
                path: p.display().to_string(),
                source: Box::new(e),
            })?;
            if let Some(prev) = lib.insert(tree) {
                return Err(GuidelineError::InFile {
                    path: p.display().to_string(),
                    source: Box::new(GuidelineError::DuplicateTree(prev.disease().to_string())),
                });
            }
        }
        Ok(lib)
    }

    pub fn get(&self, disease: &str) -> Option<&Arc<GuidelineTree>> {
        self.trees.get(&normalize_key(disease))
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Arc<GuidelineTree>> {
        self.trees.values()
    }

    pub fn diseases(&self) -> Vec<String> {
        self.trees.values().map(|t| t.disease().to_string()).collect()
    }

    /// Exact-name lookup per seed, in seed order.
    pub fn retrieve(&self, seeds: &[DiseaseCandidateSeed]) -> GuidelineRetrieval {
        let mut out = GuidelineRetrieval::default();
        for s in seeds {
            match self.get(&s.disease) {
                Some(t) => out.trees.push(Arc::clone(t)),
                None => out.missing.push(s.disease.clone()),
            }
        }
        out
    }
}

/// Baseline: retrieves a tree by embedding its rendered text directly.
#[derive(Debug)]
pub struct DirectTreeIndex {
    store: VectorStore,
}

impl DirectTreeIndex {
    pub fn build(library: &GuidelineLibrary, policy: ChunkPolicy, embedder: &dyn Embedder) -> Result<Self, GuidelineError> {
        let mut store = VectorStore::new();
        for tree in library.iter() {
            let chunks = chunk_document(tree.disease(), ChunkKind::GuidelineAux, &tree.render(), policy);
            store.upsert_chunks(chunks, embedder).map_err(GuidelineError::Store)?;
        }
        Ok(Self { store })
    }

    /// Disease of the best-matching chunk.
    pub fn top_disease(&self, embedder: &dyn Embedder, sym: &str) -> Result<Option<String>, GuidelineError> {
        if self.store.is_empty() {
            return Ok(None);
        }
        let hits = self
            .store
            .query_filtered(embedder, sym, 1, 0.0, &QueryFilter::kind(ChunkKind::GuidelineAux))
            .map_err(GuidelineError::Store)?;
        Ok(hits
            .first()
            .and_then(|h| self.store.get(h.chunk_id))
            .map(|c| c.chunk.source_id.clone()))
    }
}
