//! The turn loop: preceding and runtime prompts, doctor actions, sensor
//! reliability gating and concurrent candidate-disease probabilities.

mod action;
mod engine;
mod extract;
mod probability;
mod prompt;
mod report;
mod session;

use std::collections::HashMap;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::GatewayError;
use crate::guideline::{GuidelineError, SeedScoring};
use crate::knowledge::KnowledgeError;
use crate::sensor::SensorError;
use crate::vector_store::VectorStoreError;

pub use action::{parse_action, parse_finding_line, parse_findings, visible_text, Action, ActionKind, ParseMethod, ParsedFinding};
pub use engine::{Engine, TurnResult, REPROMPT};
pub use extract::{parse_annotations, strip_annotations, AnnotationExtractor, FindingExtractor, FindingSlot, LlmExtractor};
pub use probability::{
    compute_prior, fuse_deterministic, fuse_with_llm, fusion_messages, guideline_probability, normalize,
    parse_fusion_reply, surviving, Demographics, FusionMode, IncidenceRow, IncidenceTable,
};
pub use prompt::{
    split_runtime, PrecedingPrompt, RuntimePrompt, DEFAULT_OVERALL_INSTRUCTION, DEFAULT_TASK_INSTRUCTION,
    DEMOS_HEADER, GUIDELINES_HEADER, MED_HEADER, NONE_RETRIEVED, OVERALL_HEADER, RUNTIME_GUIDELINES_HEADER,
    RUNTIME_HEADERS, SENSOR_HEADER, SYM_HEADER, TASK_HEADER, UNRELIABLE_TAG,
};
pub use report::{build_report, CitedFinding, DiagnosisReport, ReportEntry, RuledOut};
pub use session::{
    CandidateDisease, ExportedTurn, Phase, ProbabilityPoint, RetrievalLogEntry, SensorMode, SessionState, Speaker,
    TranscriptExport, TurnRecord, Utterance,
};

#[derive(Debug, Error)]
pub enum ConsultationError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("session {0} is concluded")]
    Concluded(String),
    #[error("doctor reply has no recognizable action after a re-prompt: {reply:?}")]
    MalformedAction { reply: String },
    #[error("provider failure: {0}")]
    Provider(#[source] GatewayError),
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Store(#[from] VectorStoreError),
    #[error("knowledge base: {0}")]
    Knowledge(String),
}

impl From<KnowledgeError> for ConsultationError {
    fn from(e: KnowledgeError) -> Self {
        match e {
            KnowledgeError::Store(s) => ConsultationError::Store(s),
            KnowledgeError::Sensor(s) => ConsultationError::Sensor(s),
            KnowledgeError::Guideline(g) => ConsultationError::Guideline(g),
            other => ConsultationError::Knowledge(other.to_string()),
        }
    }
}

impl ConsultationError {
    /// True when a chat or embedding provider failed, as opposed to bad input.
    pub fn is_upstream(&self) -> bool {
        matches!(
            self,
            ConsultationError::Provider(_)
                | ConsultationError::Sensor(SensorError::Summarizer(_) | SensorError::Embedding(_))
                | ConsultationError::Store(VectorStoreError::QueryEmbedding(_) | VectorStoreError::Embedding { .. })
                | ConsultationError::Guideline(GuidelineError::Embedding(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, ConsultationError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsultationConfig {
    /// Weight of symptom similarity in the prior.
    pub prior_weight: f64,
    /// Exponent on the prior in deterministic fusion.
    pub alpha: f64,
    /// Guideline probability of a contradicted or unstarted path.
    pub epsilon: f64,
    pub prune_threshold: f64,
    pub fusion: FusionMode,
    pub map_k: usize,
    pub seed_scoring: SeedScoring,
    pub demo_k: usize,
    pub demo_threshold: f64,
    pub med_k: usize,
    pub med_threshold: f64,
    pub sensor_k: usize,
    pub sensor_threshold: f64,
    pub reliability_threshold: f64,
    pub sensor_mode: SensorMode,
    pub max_turns: usize,
    pub overall_instruction: String,
    pub task_instruction: String,
    /// Consent for patients without an explicit setting.
    pub sensor_consent_default: bool,
}

impl Default for ConsultationConfig {
    fn default() -> Self {
        Self {
            prior_weight: 0.5,
            alpha: 0.3,
            epsilon: 0.01,
            prune_threshold: 0.05,
            fusion: FusionMode::Deterministic,
            map_k: 3,
            seed_scoring: SeedScoring::Max,
            demo_k: 3,
            demo_threshold: 0.0,
            med_k: 3,
            med_threshold: 0.75,
            sensor_k: 3,
            sensor_threshold: 0.0,
            reliability_threshold: 0.05,
            sensor_mode: SensorMode::Filtered,
            max_turns: 20,
            overall_instruction: DEFAULT_OVERALL_INSTRUCTION.into(),
            task_instruction: DEFAULT_TASK_INSTRUCTION.into(),
            sensor_consent_default: true,
        }
    }
}

impl ConsultationConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConsultationError::Precondition(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("prior_weight", self.prior_weight)?;
        unit("alpha", self.alpha)?;
        unit("prune_threshold", self.prune_threshold)?;
        unit("reliability_threshold", self.reliability_threshold)?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(ConsultationError::Precondition(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.map_k == 0 || self.sensor_k == 0 || self.med_k == 0 {
            return Err(ConsultationError::Precondition("map_k, med_k and sensor_k must be at least 1".into()));
        }
        if self.max_turns == 0 {
            return Err(ConsultationError::Precondition("max_turns must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-patient sensor consent. Without consent no sensor data is read.
#[derive(Debug, Default)]
pub struct ConsentRegistry {
    default: bool,
    explicit: RwLock<HashMap<String, bool>>,
}

impl ConsentRegistry {
    pub fn new(default: bool) -> Self {
        Self {
            default,
            explicit: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, patient_id: &str) -> bool {
        self.explicit
            .read()
            .expect("consent lock")
            .get(patient_id)
            .copied()
            .unwrap_or(self.default)
    }

    pub fn set(&self, patient_id: &str, granted: bool) {
        self.explicit
            .write()
            .expect("consent lock")
            .insert(patient_id.to_string(), granted);
    }

    pub fn snapshot(&self) -> HashMap<String, bool> {
        self.explicit.read().expect("consent lock").clone()
    }
}
