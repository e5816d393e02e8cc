use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::action::{ActionKind, ParseMethod};
use super::probability::Demographics;
use super::prompt::PrecedingPrompt;
use super::report::DiagnosisReport;
use crate::guideline::{FindingSet, TreeCursor};
use crate::sensor::{FilterDecision, SensorKnowledge};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Preceding,
    Consulting,
    Concluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Patient,
    Doctor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    /// Position in the transcript, contiguous from 0.
    pub index: usize,
    pub role: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDisease {
    pub disease: String,
    pub symptom_similarity: f64,
    pub demographics_prob: f64,
    pub prior_prob: f64,
    pub guideline_prob: f64,
    pub final_prob: f64,
    /// `None` when the library has no tree for the disease.
    pub cursor: Option<TreeCursor>,
    pub narrowed: bool,
    /// Doctor turn at which the candidate entered; 0 for the preceding stage.
    pub since_turn: usize,
    pub explanation: String,
}

impl CandidateDisease {
    pub fn is_active(&self) -> bool {
        !self.narrowed
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorMode {
    Always,
    #[default]
    Filtered,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalLogEntry {
    pub turn: usize,
    pub mode: SensorMode,
    pub consent: bool,
    /// Text the filter and retriever saw.
    pub query: Option<String>,
    pub filter: Option<FilterDecision>,
    pub performed: bool,
    pub windows: usize,
    pub min_uncertainty: Option<f64>,
    pub reliable: Option<bool>,
    pub record_ids: Vec<String>,
}

impl RetrievalLogEntry {
    pub fn skipped(turn: usize, mode: SensorMode, consent: bool, query: Option<String>) -> Self {
        Self {
            turn,
            mode,
            consent,
            query,
            filter: None,
            performed: false,
            windows: 0,
            min_uncertainty: None,
            reliable: None,
            record_ids: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityPoint {
    pub disease: String,
    pub prior_prob: f64,
    pub guideline_prob: f64,
    pub final_prob: f64,
    pub narrowed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based doctor turn number.
    pub turn: usize,
    pub patient_message: String,
    pub runtime_prompt: String,
    pub raw_reply: String,
    pub doctor_message: String,
    pub action: ActionKind,
    pub parse_method: ParseMethod,
    pub reprompted: bool,
    pub findings_added: Vec<String>,
    pub findings_rejected: Vec<String>,
    pub med_knowledge_sources: Vec<String>,
    pub retrieval: RetrievalLogEntry,
    pub probabilities: Vec<ProbabilityPoint>,
    pub llm_fusion_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub patient_id: String,
    pub demographics: Demographics,
    pub phase: Phase,
    pub transcript: Vec<Utterance>,
    /// Patient statements with inline annotations removed.
    pub statements: Vec<String>,
    pub findings: FindingSet,
    pub candidates: Vec<CandidateDisease>,
    pub preceding: PrecedingPrompt,
    /// Rendered once in the preceding stage and reused verbatim.
    pub preceding_prompt: String,
    pub sensor_knowledge: Option<SensorKnowledge>,
    pub turns: Vec<TurnRecord>,
    pub missing_guidelines: Vec<String>,
    pub report: Option<DiagnosisReport>,
}

impl SessionState {
    pub fn doctor_turns(&self) -> usize {
        self.turns.len()
    }

    pub fn active(&self) -> impl Iterator<Item = &CandidateDisease> {
        self.candidates.iter().filter(|c| c.is_active())
    }

    pub fn candidate(&self, disease: &str) -> Option<&CandidateDisease> {
        let d = crate::text::normalize_key(disease);
        self.candidates.iter().find(|c| crate::text::normalize_key(&c.disease) == d)
    }

    pub fn retrieval_log(&self) -> Vec<&RetrievalLogEntry> {
        self.turns.iter().map(|t| &t.retrieval).collect()
    }

    /// Final probability of every candidate after each doctor turn.
    pub fn trajectory(&self) -> Vec<BTreeMap<String, f64>> {
        self.turns
            .iter()
            .map(|t| t.probabilities.iter().map(|p| (p.disease.clone(), p.final_prob)).collect())
            .collect()
    }

    pub fn export(&self) -> TranscriptExport {
        TranscriptExport {
            session_id: self.session_id.clone(),
            patient_id: self.patient_id.clone(),
            demographics: self.demographics.clone(),
            phase: self.phase,
            transcript: self.transcript.clone(),
            turns: self
                .turns
                .iter()
                .map(|t| ExportedTurn {
                    turn: t.turn,
                    action: t.action.clone(),
                    retrieval: t.retrieval.clone(),
                    probabilities: t.probabilities.clone(),
                })
                .collect(),
            report: self.report.clone(),
        }
    }

    pub fn transcript_json(&self) -> String {
        serde_json::to_string_pretty(&self.export()).expect("transcript serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedTurn {
    pub turn: usize,
    pub action: ActionKind,
    pub retrieval: RetrievalLogEntry,
    pub probabilities: Vec<ProbabilityPoint>,
}

/// Transcript file format: role-tagged turns, actions, retrieval log and the
/// per-turn probability trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptExport {
    pub session_id: String,
    pub patient_id: String,
    pub demographics: Demographics,
    pub phase: Phase,
    pub transcript: Vec<Utterance>,
    pub turns: Vec<ExportedTurn>,
    pub report: Option<DiagnosisReport>,
}

impl TranscriptExport {
    pub fn retrieval_count(&self) -> usize {
        self.turns.iter().filter(|t| t.retrieval.performed).count()
    }

    /// Final diagnosis text: the top report entry, if any.
    pub fn final_diagnosis(&self) -> Option<&str> {
        self.report.as_ref().and_then(|r| r.entries.first()).map(|e| e.disease.as_str())
    }
}
