//! Offline doctor that follows the guideline status lines of the runtime
//! prompt. Stands in for a chat model in simulations and fixtures.

use crate::consultation::{split_runtime, ActionKind, UNRELIABLE_TAG};
use crate::gateway::mock::completion;
use crate::gateway::{ChatBackend, ChatRequest, Completion, MessageRole};
use crate::guideline::Provenance;

/// What a guideline status line says to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum Pending {
    Ask { finding: String, question: String },
    Measure { metric: String, units: String, sources: Vec<Provenance> },
    LabTest { finding: String, test: String },
    Concluded(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatusLine {
    pub disease: String,
    pub probability: f64,
    pub ruled_out: bool,
    pub pending: Option<Pending>,
}

fn bracketed(s: &str) -> Option<(&str, &str)> {
    let s = s.strip_prefix('[')?;
    let (inner, rest) = s.split_once(']')?;
    Some((inner, rest.trim_start()))
}

pub fn parse_pending(text: &str) -> Option<Pending> {
    let text = text.trim();
    if let Some(rest) = text.strip_prefix("ask ") {
        let (finding, question) = bracketed(rest)?;
        return Some(Pending::Ask {
            finding: finding.into(),
            question: question.into(),
        });
    }
    if let Some(rest) = text.strip_prefix("measure ") {
        let (metric, rest) = bracketed(rest)?;
        let rest = rest.strip_prefix("in ")?;
        let (units, sources) = rest.split_once(" (accepted sources: ")?;
        let sources = sources
            .trim_end_matches(')')
            .split(',')
            .filter_map(Provenance::parse)
            .collect();
        return Some(Pending::Measure {
            metric: metric.into(),
            units: units.into(),
            sources,
        });
    }
    if let Some(rest) = text.strip_prefix("order in-lab test ") {
        let (finding, test) = bracketed(rest)?;
        return Some(Pending::LabTest {
            finding: finding.into(),
            test: test.into(),
        });
    }
    text.strip_prefix("concluded: ").map(|d| Pending::Concluded(d.into()))
}

/// Parses `- disease (p=0.123): ...` lines of the runtime guidelines section.
pub fn parse_status_lines(section: &str) -> Vec<StatusLine> {
    section
        .lines()
        .filter_map(|l| {
            let l = l.strip_prefix("- ")?;
            let (disease, rest) = l.split_once(" (p=")?;
            let (p, rest) = rest.split_once("): ")?;
            let probability = p.parse().ok()?;
            let ruled_out = rest.starts_with("findings rule this disease out");
            let pending = if let Some((_, next)) = rest.split_once("; next: ") {
                parse_pending(next)
            } else if let Some(next) = rest.strip_prefix("findings rule this disease out; ") {
                parse_pending(next)
            } else {
                None
            };
            Some(StatusLine {
                disease: disease.into(),
                probability,
                ruled_out,
                pending,
            })
        })
        .collect()
}

/// Everyday name of a wearable metric.
pub fn metric_phrase(metric: &str) -> String {
    match metric {
        "heart_rate_bpm" => "heart rate".into(),
        "spo2_percent" => "blood oxygen".into(),
        "respiratory_rate" => "breathing rate".into(),
        "sleep_score" => "sleep score".into(),
        "step_count" => "step count".into(),
        "stress_score" => "stress level".into(),
        other => other.replace('_', " "),
    }
}

pub fn sensor_query(metric: &str) -> String {
    format!("Could you check the {} readings on your wearable?", metric_phrase(metric))
}

pub fn lab_measurement(metric: &str) -> String {
    format!("in-lab measurement of {metric}")
}

/// Deterministic guideline follower.
///
/// Walks candidates from most to least likely and issues the first pending
/// step it has not issued before. Measurements go to the wearable first and
/// to the lab once the wearable was tried or flagged unreliable. Diagnoses
/// when nothing new is left to do.
#[derive(Debug, Clone, Copy, Default)]
pub struct GuidelineDoctor;

impl GuidelineDoctor {
    pub fn decide(runtime_prompt: &str, issued: &[ActionKind]) -> ActionKind {
        let Ok([_, _, guidelines, sensor]) = split_runtime(runtime_prompt) else {
            return ActionKind::SummarizeDiagnosis;
        };
        let unreliable = sensor.contains(UNRELIABLE_TAG);
        let fresh = |a: &ActionKind| !issued.contains(a);
        for line in parse_status_lines(&guidelines).iter().filter(|l| !l.ruled_out) {
            let candidate = match &line.pending {
                None | Some(Pending::Concluded(_)) => continue,
                Some(Pending::Ask { question, .. }) => Some(ActionKind::InquireSymptom(question.clone())),
                Some(Pending::LabTest { test, .. }) => Some(ActionKind::RequestInLabTest(test.clone())),
                Some(Pending::Measure { metric, units, sources }) => {
                    let sensor = ActionKind::AccessSensorData(sensor_query(metric));
                    let lab = ActionKind::RequestInLabTest(lab_measurement(metric));
                    let ask = ActionKind::InquireSymptom(format!("What is your {} in {units}?", metric_phrase(metric)));
                    let mut options = Vec::new();
                    if sources.contains(&Provenance::Sensor) && !unreliable {
                        options.push(sensor);
                    }
                    if sources.contains(&Provenance::InLab) {
                        options.push(lab);
                    }
                    if sources.contains(&Provenance::PatientStated) {
                        options.push(ask);
                    }
                    options.into_iter().find(|a| fresh(a))
                }
            };
            if let Some(a) = candidate.filter(|a| fresh(a)) {
                return a;
            }
        }
        ActionKind::SummarizeDiagnosis
    }

    pub fn reply_for(action: &ActionKind) -> String {
        let visible = match action {
            ActionKind::InquireSymptom(q) => q.clone(),
            ActionKind::RequestInLabTest(t) => format!("I would like you to have this test done: {t}."),
            ActionKind::AccessSensorData(q) => q.clone(),
            ActionKind::SummarizeDiagnosis => "Thank you. I have enough information for an assessment.".into(),
        };
        format!("{visible}\n{}", action.to_line())
    }
}

impl ChatBackend for GuidelineDoctor {
    fn complete(&self, request: &ChatRequest) -> crate::gateway::Result<Completion> {
        let issued: Vec<ActionKind> = request
            .messages
            .iter()
            .filter(|m| m.role == MessageRole::Assistant)
            .filter_map(|m| crate::consultation::parse_action(&m.content).map(|a| a.kind))
            .collect();
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User && m.content.contains(crate::consultation::RUNTIME_GUIDELINES_HEADER))
            .map_or("", |m| m.content.as_str());
        let action = Self::decide(prompt, &issued);
        Ok(completion(request, Self::reply_for(&action)))
    }
}
