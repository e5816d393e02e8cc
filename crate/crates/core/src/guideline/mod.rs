//! Guideline trees: DSL, step-wise interpretation, and retrieval through the
//! symptom to disease table.

mod dsl;
mod findings;
mod interpreter;
mod mapping;

use thiserror::Error;

use crate::gateway::GatewayError;
use crate::vector_store::VectorStoreError;

pub use dsl::{Comparator, GuidelineNode, GuidelineTree, MetricDecl, NodeCounts, NodeKind, Predicate};
pub use findings::{Finding, FindingSet, FindingValue, Provenance};
pub use interpreter::{evaluate_from_root, PathStep, StepOutcome, TreeCursor};
pub use mapping::{
    DirectTreeIndex, DiseaseCandidateSeed, GuidelineLibrary, GuidelineRetrieval, SeedScoring, SymptomDiseaseTable,
    SymptomEntry,
};

#[derive(Debug, Error)]
pub enum GuidelineError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("root `{0}` is not a declared node")]
    MissingRoot(String),
    #[error("node `{node}` points to undeclared child `{child}`")]
    DanglingChild { node: String, child: String },
    #[error("cycle through nodes {}", path.join(" -> "))]
    Cycle { path: Vec<String> },
    #[error("node `{node}` references undeclared metric `{metric}`")]
    UnknownMetric { node: String, metric: String },
    #[error("node `{0}` is unreachable from the root")]
    Unreachable(String),
    #[error("invalid node `{node}`: {reason}")]
    InvalidNode { node: String, reason: String },
    #[error("unit mismatch for `{metric}`: tree uses `{expected}`, finding has `{found}`")]
    UnitMismatch { metric: String, expected: String, found: String },
    #[error("finding `{key}` should be a {expected}, got `{found}`")]
    FindingType { key: String, expected: String, found: String },
    #[error("cursor {cursor} does not belong to tree {tree}")]
    CursorMismatch { cursor: String, tree: String },
    #[error("two trees for disease `{0}`")]
    DuplicateTree(String),
    #[error("{path}: {source}")]
    InFile {
        path: String,
        #[source]
        source: Box<GuidelineError>,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding failed: {0}")]
    Embedding(#[source] GatewayError),
    #[error(transparent)]
    Store(#[from] VectorStoreError),
}
