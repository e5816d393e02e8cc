//! Semantic retrieval filter: logistic regression over query embeddings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SensorError;
use crate::gateway::{check_embeddings, ChatMessage, ChatRole, Embedder, Gateway};
use crate::gateway::mock::PARAPHRASE_MARKER;
use crate::vector_store::EmbeddingVector;

pub const FILTER_FORMAT: &str = "dxloop-sensor-filter";
pub const FILTER_VERSION: u32 = 1;
pub const MIN_TRAINING_EXAMPLES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledQuery {
    pub query: String,
    pub needs_sensor: bool,
}

impl LabeledQuery {
    pub fn new(query: impl Into<String>, needs_sensor: bool) -> Self {
        Self {
            query: query.into(),
            needs_sensor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub threshold: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self {
            epochs: 400,
            learning_rate: 2.0,
            l2: 1e-4,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    /// Training set size after augmentation.
    pub samples: usize,
    pub original_samples: usize,
    pub augmented: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterModel {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub retrieve: bool,
    /// `None` when scoring failed and the filter opened.
    pub score: Option<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Unit-normalized features; the zero vector stays zero.
fn features(v: &EmbeddingVector) -> Vec<f64> {
    let n = v.norm();
    if n == 0.0 {
        v.values().to_vec()
    } else {
        v.values().iter().map(|x| x / n).collect()
    }
}

impl FilterModel {
    pub fn score_vector(&self, v: &EmbeddingVector) -> Result<f64, SensorError> {
        if v.dim() != self.dim {
            return Err(SensorError::FilterDimension {
                model: self.dim,
                query: v.dim(),
            });
        }
        let z: f64 = features(v).iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>() + self.bias;
        Ok(sigmoid(z))
    }

    pub fn score(&self, embedder: &dyn Embedder, query: &str) -> Result<f64, SensorError> {
        let vs = embedder.embed(&[query.to_string()]).map_err(SensorError::Embedding)?;
        check_embeddings(1, Some(self.dim), &vs).map_err(SensorError::Embedding)?;
        self.score_vector(&vs[0])
    }

    /// Fails open: any scoring error yields `retrieve = true`.
    pub fn should_retrieve(&self, embedder: &dyn Embedder, query: &str) -> FilterDecision {
        match self.score(embedder, query) {
            Ok(s) => FilterDecision {
                retrieve: s >= self.threshold,
                score: Some(s),
            },
            Err(e) => {
                tracing::warn!(error = %e, "sensor filter failed; retrieving anyway");
                FilterDecision {
                    retrieve: true,
                    score: None,
                }
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SensorError> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self).map_err(|e| SensorError::Format(e.to_string()))?;
        fs::write(path, body).map_err(|source| SensorError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SensorError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SensorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let m: FilterModel = serde_json::from_str(&text).map_err(|e| SensorError::Format(e.to_string()))?;
        if m.format != FILTER_FORMAT || m.version != FILTER_VERSION {
            return Err(SensorError::Format(format!(
                "unsupported filter artifact {} v{}",
                m.format, m.version
            )));
        }
        if m.weights.len() != m.dim || m.weights.iter().any(|w| !w.is_finite()) || !m.bias.is_finite() {
            return Err(SensorError::Format("filter weights malformed".into()));
        }
        Ok(m)
    }
}

/// Rewrites one query with the augmenter role.
pub fn paraphrase(gateway: &Gateway, query: &str) -> Result<String, SensorError> {
    let messages = vec![
        ChatMessage::system(
            "You rephrase questions a physician asks a patient. Keep the meaning, change the wording, \
             and answer with the rephrased question only.",
        ),
        ChatMessage::user(format!("{PARAPHRASE_MARKER} {query}")),
    ];
    let reply = gateway
        .chat(ChatRole::Augmenter, messages)
        .map_err(SensorError::Embedding)?;
    let text = reply.text.trim().to_string();
    if text.is_empty() {
        return Err(SensorError::Format("augmenter returned an empty rewrite".into()));
    }
    Ok(text)
}

/// Full-batch gradient descent on mean cross-entropy from zero weights.
/// With `augment`, every query is paraphrased once and added with its label.
pub fn train_filter(
    embedder: &dyn Embedder,
    labeled: &[LabeledQuery],
    options: TrainingOptions,
    augment: Option<&Gateway>,
) -> Result<FilterModel, SensorError> {
    if labeled.len() < MIN_TRAINING_EXAMPLES {
        return Err(SensorError::TooFewExamples {
            got: labeled.len(),
            need: MIN_TRAINING_EXAMPLES,
        });
    }
    let positives = labeled.iter().filter(|l| l.needs_sensor).count();
    if positives == 0 || positives == labeled.len() {
        return Err(SensorError::SingleClass);
    }
    let mut set: Vec<LabeledQuery> = labeled.to_vec();
    if let Some(gw) = augment {
        for l in labeled {
            set.push(LabeledQuery::new(paraphrase(gw, &l.query)?, l.needs_sensor));
        }
    }
    let texts: Vec<String> = set.iter().map(|l| l.query.clone()).collect();
    let vectors = embedder.embed(&texts).map_err(SensorError::Embedding)?;
    check_embeddings(texts.len(), embedder.dim(), &vectors).map_err(SensorError::Embedding)?;
    let xs: Vec<Vec<f64>> = vectors.iter().map(features).collect();
    let ys: Vec<f64> = set.iter().map(|l| f64::from(u8::from(l.needs_sensor))).collect();
    let dim = xs[0].len();
    let n = xs.len() as f64;

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut loss = f64::NAN;
    for _ in 0..options.epochs {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        loss = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let p = sigmoid(x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
            let err = p - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
            let p = p.clamp(1e-12, 1.0 - 1e-12);
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        loss /= n;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= options.learning_rate * (g / n + options.l2 * *wi);
        }
        b -= options.learning_rate * gb / n;
    }
    Ok(FilterModel {
        format: FILTER_FORMAT.into(),
        version: FILTER_VERSION,
        dim,
        weights: w,
        bias: b,
        threshold: options.threshold,
        metadata: TrainingMetadata {
            samples: set.len(),
            original_samples: labeled.len(),
            augmented: augment.is_some(),
            epochs: options.epochs,
            learning_rate: options.learning_rate,
            l2: options.l2,
            final_loss: loss,
        },
    })
}

/// Fraction of `held_out` classified correctly.
pub fn evaluate_filter(model: &FilterModel, embedder: &dyn Embedder, held_out: &[LabeledQuery]) -> Result<f64, SensorError> {
    if held_out.is_empty() {
        return Ok(0.0);
    }
    let texts: Vec<String> = held_out.iter().map(|l| l.query.clone()).collect();
    let vectors = embedder.embed(&texts).map_err(SensorError::Embedding)?;
    check_embeddings(texts.len(), Some(model.dim), &vectors).map_err(SensorError::Embedding)?;
    let mut correct = 0usize;
    for (v, l) in vectors.iter().zip(held_out) {
        if (model.score_vector(v)? >= model.threshold) == l.needs_sensor {
            correct += 1;
        }
    }
    Ok(correct as f64 / held_out.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::{FailingEmbedder, HashEmbedder};
    use crate::sensor::corpus::synthetic_queries;

    #[test]
    fn rejects_small_or_single_class_sets() {
        let e = HashEmbedder::default();
        let few: Vec<_> = (0..5).map(|i| LabeledQuery::new(format!("q{i}"), i % 2 == 0)).collect();
        assert!(matches!(
            train_filter(&e, &few, TrainingOptions::default(), None),
            Err(SensorError::TooFewExamples { .. })
        ));
        let one: Vec<_> = (0..25).map(|i| LabeledQuery::new(format!("q{i}"), true)).collect();
        assert!(matches!(
            train_filter(&e, &one, TrainingOptions::default(), None),
            Err(SensorError::SingleClass)
        ));
    }

    #[test]
    fn deterministic_training_and_scoring() {
        let e = HashEmbedder::default();
        let data = synthetic_queries(40, 7);
        let a = train_filter(&e, &data, TrainingOptions::default(), None).unwrap();
        let b = train_filter(&e, &data, TrainingOptions::default(), None).unwrap();
        assert_eq!(a, b);
        let q = "What did your watch record for your heart rate last night?";
        assert_eq!(a.should_retrieve(&e, q), b.should_retrieve(&e, q));
    }

    #[test]
    fn fails_open_on_embedding_error() {
        let e = HashEmbedder::default();
        let m = train_filter(&e, &synthetic_queries(40, 1), TrainingOptions::default(), None).unwrap();
        let d = m.should_retrieve(&FailingEmbedder, "How long have you had this cough?");
        assert!(d.retrieve);
        assert!(d.score.is_none());
    }

    #[test]
    fn artifact_round_trip() {
        let e = HashEmbedder::default();
        let m = train_filter(&e, &synthetic_queries(40, 3), TrainingOptions::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("filter.json");
        m.save(&p).unwrap();
        assert_eq!(FilterModel::load(&p).unwrap(), m);
    }

    #[test]
    fn score_in_unit_interval() {
        let e = HashEmbedder::default();
        let m = train_filter(&e, &synthetic_queries(40, 5), TrainingOptions::default(), None).unwrap();
        for q in ["", "x", "heart rate heart rate heart rate"] {
            let s = m.score(&e, q).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
    }
}
