//! Judged scoring of transcripts, retrieval rate and scripted patients.

mod doctor;
mod score;
mod simulate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consultation::{ConsultationError, TranscriptExport};
use crate::gateway::GatewayError;

pub use doctor::{lab_measurement, metric_phrase, parse_pending, parse_status_lines, sensor_query, GuidelineDoctor, Pending, StatusLine};
pub use score::{
    guideline_questions, judge_messages, parse_judge_reply, score_dialogue, DimensionScore, GptScore, RubricJudge,
    DIALOGUE_HEADER, GROUND_TRUTH_HEADER, GUIDELINE_HEADER, JUDGE_REPROMPT, OUTCOME_HEADER, SCORE_MAX,
};
pub use simulate::{ensure_sensor_trace, simulate_batch, simulate_patient, PatientAnswer, PatientScript, Simulation, SyntheticPatient};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("transcript has no doctor turns")]
    NoTurns,
    #[error("judge: {0}")]
    Judge(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Consultation(#[from] ConsultationError),
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Sensor retrievals performed per doctor turn.
pub fn retrieval_rate(transcript: &TranscriptExport) -> Result<f64> {
    if transcript.turns.is_empty() {
        return Err(EvalError::NoTurns);
    }
    Ok(transcript.retrieval_count() as f64 / transcript.turns.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub session_id: String,
    pub ground_truth: String,
    pub final_diagnosis: String,
    pub compliance: f64,
    pub sensor_utilization: f64,
    pub accuracy: f64,
    pub overall: f64,
    pub retrieval_rate: f64,
}

impl ScoreRow {
    pub fn new(transcript: &TranscriptExport, ground_truth: &str, score: &GptScore) -> Result<Self> {
        Ok(Self {
            session_id: transcript.session_id.clone(),
            ground_truth: ground_truth.to_string(),
            final_diagnosis: transcript.final_diagnosis().unwrap_or_default().to_string(),
            compliance: score.compliance.score,
            sensor_utilization: score.sensor_utilization.score,
            accuracy: score.accuracy.score,
            overall: score.overall,
            retrieval_rate: retrieval_rate(transcript)?,
        })
    }
}

/// Per-dialogue rows followed by a `mean` row.
pub fn scores_csv(rows: &[ScoreRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| EvalError::Format(e.to_string()))?;
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: fn(&ScoreRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        w.serialize(ScoreRow {
            session_id: "mean".into(),
            ground_truth: String::new(),
            final_diagnosis: String::new(),
            compliance: mean(|r| r.compliance),
            sensor_utilization: mean(|r| r.sensor_utilization),
            accuracy: mean(|r| r.accuracy),
            overall: mean(|r| r.overall),
            retrieval_rate: mean(|r| r.retrieval_rate),
        })
        .map_err(|e| EvalError::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Format(e.to_string()))
}
