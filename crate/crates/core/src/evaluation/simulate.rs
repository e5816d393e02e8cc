use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::doctor::{lab_measurement, metric_phrase};
use super::{EvalError, Result};
use crate::consultation::{ActionKind, Demographics, DiagnosisReport, Engine, TranscriptExport};
use crate::guideline::{GuidelineLibrary, NodeKind};
use crate::text::normalize_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientAnswer {
    /// Answer label or number with units, as the guideline expects it.
    pub value: String,
    /// What the patient says; generated from `value` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Scripted patient for simulated consultations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPatient {
    pub profile_id: String,
    /// Sensor store id; defaults to `profile_id`.
    #[serde(default)]
    pub patient_id: Option<String>,
    #[serde(default)]
    pub demographics: Demographics,
    pub first_symptoms: String,
    pub ground_truth: String,
    #[serde(default)]
    pub answers: BTreeMap<String, PatientAnswer>,
    /// Finding keys the patient cannot answer.
    #[serde(default)]
    pub withheld: Vec<String>,
    /// In-lab results by finding key, e.g. `"tsh_result": "low"`.
    #[serde(default)]
    pub lab_results: BTreeMap<String, String>,
    /// Said, in order, to questions the script does not cover.
    #[serde(default)]
    pub extra_statements: Vec<String>,
    /// Sensor CSV or JSON-lines file, relative to the patients file.
    #[serde(default)]
    pub sensor_trace: Option<PathBuf>,
}

impl SyntheticPatient {
    pub fn patient_id(&self) -> &str {
        self.patient_id.as_deref().unwrap_or(&self.profile_id)
    }

    pub fn load_jsonl(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut p: Self = serde_json::from_str(line)
                .map_err(|e| EvalError::Format(format!("{} line {}: {e}", path.display(), i + 1)))?;
            if let Some(trace) = &mut p.sensor_trace {
                if trace.is_relative() {
                    *trace = base.join(&*trace);
                }
            }
            out.push(p);
        }
        Ok(out)
    }
}

fn spoken(value: &str) -> String {
    match normalize_key(value).as_str() {
        "yes" => "Yes.".into(),
        "no" => "No.".into(),
        _ => format!("It is {value}."),
    }
}

/// Finding key a question asks for: an exact guideline prompt, a metric
/// phrase, or a scripted key named in the question.
fn asked_key(question: &str, library: &GuidelineLibrary, patient: &SyntheticPatient) -> Option<String> {
    let q = question.trim();
    for tree in library.iter() {
        for n in tree.nodes() {
            if let NodeKind::Question { finding, prompt, .. } = &n.kind {
                if prompt.trim() == q {
                    return Some(normalize_key(finding));
                }
            }
        }
        for m in tree.metrics() {
            if q.to_lowercase().contains(&format!("your {} in", metric_phrase(&m.name))) {
                return Some(normalize_key(&m.name));
            }
        }
    }
    let lower = q.to_lowercase();
    patient
        .answers
        .keys()
        .chain(&patient.withheld)
        .find(|k| lower.contains(&k.replace('_', " ")))
        .map(|k| normalize_key(k))
}

fn lab_key(test: &str, library: &GuidelineLibrary) -> Option<String> {
    for tree in library.iter() {
        for m in tree.metrics() {
            if test == lab_measurement(&m.name) {
                return Some(normalize_key(&m.name));
            }
        }
        for n in tree.nodes() {
            if let NodeKind::InLabTest { test: t, .. } = &n.kind {
                if t.trim() == test.trim() {
                    return n.lab_finding_key();
                }
            }
        }
    }
    None
}

/// The patient's side of one exchange; `None` once the script is exhausted.
#[derive(Debug, Clone)]
pub struct PatientScript<'a> {
    patient: &'a SyntheticPatient,
    extra: std::slice::Iter<'a, String>,
}

impl<'a> PatientScript<'a> {
    pub fn new(patient: &'a SyntheticPatient) -> Self {
        Self {
            patient,
            extra: patient.extra_statements.iter(),
        }
    }

    pub fn respond(&mut self, action: &ActionKind, library: &GuidelineLibrary) -> Option<String> {
        let p = self.patient;
        match action {
            ActionKind::SummarizeDiagnosis => None,
            ActionKind::AccessSensorData(_) => Some("Sure, go ahead and look at my watch data.".into()),
            ActionKind::InquireSymptom(q) => match asked_key(q, library, p) {
                Some(k) if p.withheld.iter().any(|w| normalize_key(w) == k) => Some("I'm not sure.".into()),
                Some(k) => match p.answers.iter().find(|(key, _)| normalize_key(key) == k) {
                    Some((_, a)) => {
                        let text = a.text.clone().unwrap_or_else(|| spoken(&a.value));
                        Some(format!("{text} ({k}={})", a.value))
                    }
                    None => self.extra.next().cloned(),
                },
                None => self.extra.next().cloned(),
            },
            ActionKind::RequestInLabTest(t) => {
                let result = lab_key(t, library).and_then(|k| {
                    p.lab_results
                        .iter()
                        .find(|(key, _)| normalize_key(key) == k)
                        .map(|(_, v)| format!("The result of the {t} came back: {v} ({k}={v}; in-lab)"))
                });
                Some(result.unwrap_or_else(|| "I'm not sure I can get that test done.".into()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub profile_id: String,
    pub ground_truth: String,
    pub transcript: TranscriptExport,
    pub report: DiagnosisReport,
    /// The script ran out before the doctor concluded.
    pub truncated: bool,
}

/// Loads the patient's sensor trace into the engine's store if the patient
/// has no records yet.
pub fn ensure_sensor_trace(engine: &Engine, patient: &SyntheticPatient) -> Result<()> {
    let Some(trace) = &patient.sensor_trace else {
        return Ok(());
    };
    let present = {
        let kb = engine.knowledge().read().unwrap_or_else(|e| e.into_inner());
        let found = kb.sensors.records_of(patient.patient_id()).next().is_some();
        found
    };
    if !present {
        let mut kb = engine.knowledge().write().unwrap_or_else(|e| e.into_inner());
        kb.ingest_sensor_file(trace, engine.gateway().embedder())
            .map_err(|e| EvalError::Consultation(e.into()))?;
    }
    Ok(())
}

/// Drives one session from the patient's script until the doctor
/// diagnoses, the turn limit is hit or the script runs out.
pub fn simulate_patient(engine: &Engine, patient: &SyntheticPatient, session_id: &str) -> Result<Simulation> {
    ensure_sensor_trace(engine, patient)?;
    let (mut state, mut turn) = engine.start(
        session_id,
        patient.patient_id(),
        &patient.first_symptoms,
        patient.demographics.clone(),
    )?;
    let mut script = PatientScript::new(patient);
    let mut truncated = false;
    while state.phase != crate::consultation::Phase::Concluded {
        let reply = {
            let kb = engine.knowledge().read().unwrap_or_else(|e| e.into_inner());
            script.respond(&turn.action, &kb.library)
        };
        let Some(reply) = reply else {
            truncated = !matches!(turn.action, ActionKind::SummarizeDiagnosis);
            break;
        };
        turn = engine.step(&mut state, &reply)?;
    }
    let report = engine.finalize(&mut state);
    Ok(Simulation {
        profile_id: patient.profile_id.clone(),
        ground_truth: patient.ground_truth.clone(),
        transcript: state.export(),
        report,
        truncated,
    })
}

/// Runs `n` simulations over `patients` (cycled) in parallel. Results keep
/// input order.
pub fn simulate_batch(engine: &Engine, patients: &[SyntheticPatient], n: usize) -> Vec<Result<Simulation>> {
    if patients.is_empty() {
        return Vec::new();
    }
    // traces first, so parallel sessions never race on the store writer
    let jobs: Vec<(String, &SyntheticPatient)> = (0..n)
        .map(|i| {
            let p = &patients[i % patients.len()];
            let id = if i < patients.len() {
                p.profile_id.clone()
            } else {
                format!("{}-{}", p.profile_id, i / patients.len())
            };
            (id, p)
        })
        .collect();
    let mut prepared: BTreeMap<usize, EvalError> = BTreeMap::new();
    for (i, (_, p)) in jobs.iter().enumerate() {
        if let Err(e) = ensure_sensor_trace(engine, p) {
            prepared.insert(i, e);
        }
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .iter()
            .enumerate()
            .map(|(i, (id, p))| {
                let failed = prepared.remove(&i);
                s.spawn(move || match failed {
                    Some(e) => Err(e),
                    None => simulate_patient(engine, p, id),
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(EvalError::Format("simulation thread panicked".into()))))
            .collect()
    })
}
