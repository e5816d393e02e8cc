//! Wearable time series, per-record reliability, the retrieval filter and the
//! retrieve-then-summarize pipeline.

mod corpus;
mod filter;
mod records;
mod summarize;
mod uncertainty;
mod windows;

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::vector_store::VectorStoreError;

pub use corpus::synthetic_queries;
pub use filter::{
    evaluate_filter, paraphrase, train_filter, FilterDecision, FilterModel, LabeledQuery, TrainingMetadata,
    TrainingOptions, FILTER_FORMAT, FILTER_VERSION, MIN_TRAINING_EXAMPLES,
};
pub use records::{
    parse_csv, parse_jsonl, parse_timestamp, IngestReport, MetricCatalog, MetricSpec, RawRecord, Rejection,
    SensorRecord, SensorStore,
};
pub use summarize::{
    knowledge_from_context, summarize_sensor, summarizer_messages, DigestSummarizer, MetricReading, SensorKnowledge,
    CONTEXT_MARKER,
};
pub use uncertainty::{fit_baseline, gaussian_ratio, profile_uncertainty, Baseline, UncertaintyPolicy};
pub use windows::{
    parse_window_source_id, patient_prefix, retrieve_sensor_context, window_source_id, SensorContext, SensorWindow,
};

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("malformed sensor data: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("need at least {need} labeled queries, got {got}")]
    TooFewExamples { got: usize, need: usize },
    #[error("labeled queries contain a single class")]
    SingleClass,
    #[error("filter expects dimension {model}, query embedding has {query}")]
    FilterDimension { model: usize, query: usize },
    #[error("embedding failed: {0}")]
    Embedding(#[source] GatewayError),
    #[error("summarizer failed: {0}")]
    Summarizer(#[source] GatewayError),
    #[error("sensor context is empty")]
    EmptyContext,
    #[error(transparent)]
    Store(#[from] VectorStoreError),
}
