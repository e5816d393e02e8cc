use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use dxloop_core::consultation::{Demographics, DiagnosisReport, Phase, TranscriptExport, TurnResult};
use dxloop_core::sensor::{parse_csv, parse_jsonl, IngestReport, RawRecord};
use dxloop_core::vector_store::{SyncEvent, SyncReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, ApiJson};
use crate::log::{valid_session_id, ApiSession, RecordKind};
use crate::state::AppState;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub patient_id: String,
    #[serde(default)]
    pub demographics: Demographics,
    pub first_symptoms: String,
    /// Generated when absent.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session: ApiSession,
    pub turn: TurnResult,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientMessage {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session: ApiSession,
    pub transcript: TranscriptExport,
}

pub async fn create_session(
    State(app): State<AppState>,
    ApiJson(body): ApiJson<CreateSession>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    if body.patient_id.trim().is_empty() {
        return Err(ApiError::invalid("patient_id is empty"));
    }
    let id = body
        .session_id
        .unwrap_or_else(|| format!("s-{}", chrono::Utc::now().format("%Y%m%d%H%M%S%f")));
    if !valid_session_id(&id) {
        return Err(ApiError::invalid(format!(
            "session_id {id:?} must be 1-128 characters of letters, digits, '-', '_' or '.' and not start with '.'"
        )));
    }
    let engine = app.engine().clone();
    let (state, turn) = tokio::task::spawn_blocking(move || {
        engine.start(&id, &body.patient_id, &body.first_symptoms, body.demographics)
    })
    .await??;
    let session = app.insert(state)?;
    Ok((StatusCode::CREATED, Json(Created { session, turn })))
}

pub async fn post_message(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ApiJson(body): ApiJson<PatientMessage>,
) -> Result<Json<TurnResult>, ApiError> {
    let mut guard = app.try_lock(&id)?;
    if guard.state.phase == Phase::Concluded {
        return Err(dxloop_core::consultation::ConsultationError::Concluded(id).into());
    }
    let engine = app.engine().clone();
    let mut state = guard.state.clone();
    // the guard is held across the turn; a dropped request discards `state`
    let (state, result) = tokio::task::spawn_blocking(move || {
        let r = engine.step(&mut state, &body.text);
        (state, r)
    })
    .await?;
    let turn = result?;
    app.commit(&mut guard, state, RecordKind::Turn)?;
    Ok(Json(turn))
}

pub async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let guard = app.lock(&id).await?;
    Ok(Json(SessionView {
        session: guard.meta.clone(),
        transcript: guard.state.export(),
    }))
}

/// The exact transcript bytes an in-process run would write.
pub async fn get_transcript(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let guard = app.lock(&id).await?;
    let body = guard.state.transcript_json();
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

pub async fn finalize(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<DiagnosisReport>, ApiError> {
    let mut guard = app.try_lock(&id)?;
    if let (Phase::Concluded, Some(r)) = (guard.state.phase, &guard.state.report) {
        return Ok(Json(r.clone()));
    }
    let mut state = guard.state.clone();
    let report = app.engine().finalize(&mut state);
    app.commit(&mut guard, state, RecordKind::Finalized)?;
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UploadRecord {
    /// Defaults to the patient in the path.
    #[serde(default)]
    pub patient_id: Option<String>,
    pub metric: String,
    pub timestamp: String,
    pub value: Value,
    #[serde(default)]
    pub units: Option<String>,
}

/// Exactly one of `records`, `csv` or `jsonl`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorUpload {
    #[serde(default)]
    pub records: Option<Vec<UploadRecord>>,
    #[serde(default)]
    pub csv: Option<String>,
    #[serde(default)]
    pub jsonl: Option<String>,
}

type Rows = Vec<(usize, Result<RawRecord, String>)>;

fn upload_rows(patient_id: &str, body: SensorUpload) -> Result<Rows, ApiError> {
    let rows = match (body.records, body.csv, body.jsonl) {
        (Some(records), None, None) => records
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                let value = match r.value {
                    Value::String(s) => Ok(s),
                    Value::Number(n) => Ok(n.to_string()),
                    other => Err(format!("value must be a string or number, got {other}")),
                };
                let row = value.map(|value| RawRecord {
                    patient_id: r.patient_id.unwrap_or_else(|| patient_id.to_string()),
                    metric: r.metric,
                    timestamp: r.timestamp,
                    value,
                    units: r.units,
                });
                (i + 1, row)
            })
            .collect(),
        (None, Some(csv), None) => parse_csv(&csv).map_err(|e| ApiError::invalid(e.to_string()))?,
        (None, None, Some(jsonl)) => parse_jsonl(&jsonl),
        _ => return Err(ApiError::invalid("give exactly one of records, csv or jsonl")),
    };
    if let Some((row, r)) = rows
        .iter()
        .find_map(|(i, r)| r.as_ref().ok().filter(|r| r.patient_id.trim() != patient_id).map(|r| (i, r)))
    {
        return Err(ApiError::invalid(format!(
            "row {row} names patient {:?}, not {patient_id:?}",
            r.patient_id
        )));
    }
    Ok(rows)
}

pub async fn ingest_sensors(
    State(app): State<AppState>,
    Path(patient_id): Path<String>,
    ApiJson(body): ApiJson<SensorUpload>,
) -> Result<Json<IngestReport>, ApiError> {
    let rows = upload_rows(&patient_id, body)?;
    let engine = app.engine().clone();
    let report = tokio::task::spawn_blocking(move || {
        let mut kb = engine.knowledge().write().unwrap_or_else(|e| e.into_inner());
        kb.ingest_sensor_rows(rows, engine.gateway().embedder())
    })
    .await??;
    Ok(Json(report))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Consent {
    pub granted: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ConsentView {
    pub patient_id: String,
    pub granted: bool,
}

pub async fn put_consent(
    State(app): State<AppState>,
    Path(patient_id): Path<String>,
    ApiJson(body): ApiJson<Consent>,
) -> Result<Json<ConsentView>, ApiError> {
    app.set_consent(&patient_id, body.granted)?;
    Ok(Json(ConsentView {
        patient_id,
        granted: body.granted,
    }))
}

pub async fn get_consent(State(app): State<AppState>, Path(patient_id): Path<String>) -> Json<ConsentView> {
    let granted = app.engine().consent().get(&patient_id);
    Json(ConsentView { patient_id, granted })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SensorReads {
    pub patient_id: String,
    /// Completed sensor-store retrievals for the patient since start.
    pub reads: u64,
}

pub async fn sensor_reads(State(app): State<AppState>, Path(patient_id): Path<String>) -> Json<SensorReads> {
    let reads = {
        let kb = app.engine().knowledge().read().unwrap_or_else(|e| e.into_inner());
        kb.sensors.read_count(&patient_id)
    };
    Json(SensorReads { patient_id, reads })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncRequest {
    pub event: SyncEvent,
}

pub async fn kb_sync(State(app): State<AppState>, ApiJson(body): ApiJson<SyncRequest>) -> Result<Json<SyncReport>, ApiError> {
    let engine = app.engine().clone();
    let report = tokio::task::spawn_blocking(move || {
        let mut kb = engine.knowledge().write().unwrap_or_else(|e| e.into_inner());
        kb.sync(&body.event, engine.gateway().embedder())
    })
    .await??;
    Ok(Json(report))
}

pub async fn health(State(app): State<AppState>) -> Json<Value> {
    let (sessions, quarantined) = app.counts();
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "sessions": sessions,
        "quarantined": quarantined,
    }))
}

pub async fn openapi() -> Json<Value> {
    Json(crate::openapi::document())
}
