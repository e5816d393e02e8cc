//! Reply protocol: an optional block of `FINDING:` lines and one trailing
//! `ACTION:` line.
//!
//! ```text
//! FINDING: heart_rate_bpm = 72 bpm (patient)
//! ACTION: ASK("How long have you had the cough?")
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::guideline::{Finding, FindingValue, Provenance};
use crate::text::normalize_key;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum ActionKind {
    InquireSymptom(String),
    RequestInLabTest(String),
    AccessSensorData(String),
    SummarizeDiagnosis,
}

impl ActionKind {
    pub fn name(&self) -> &'static str {
        match self {
            ActionKind::InquireSymptom(_) => "inquire_symptom",
            ActionKind::RequestInLabTest(_) => "request_in_lab_test",
            ActionKind::AccessSensorData(_) => "access_sensor_data",
            ActionKind::SummarizeDiagnosis => "summarize_diagnosis",
        }
    }

    pub fn argument(&self) -> Option<&str> {
        match self {
            ActionKind::InquireSymptom(s) | ActionKind::RequestInLabTest(s) | ActionKind::AccessSensorData(s) => {
                Some(s)
            }
            ActionKind::SummarizeDiagnosis => None,
        }
    }

    /// The canonical `ACTION:` line.
    pub fn to_line(&self) -> String {
        let quote = |s: &str| s.replace('"', "'");
        match self {
            ActionKind::InquireSymptom(q) => format!("ACTION: ASK(\"{}\")", quote(q)),
            ActionKind::RequestInLabTest(t) => format!("ACTION: LABTEST(\"{}\")", quote(t)),
            ActionKind::AccessSensorData(q) => format!("ACTION: SENSOR(\"{}\")", quote(q)),
            ActionKind::SummarizeDiagnosis => "ACTION: DIAGNOSE".into(),
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMethod {
    ActionLine,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub raw_text: String,
    pub method: ParseMethod,
}

/// Text of a reply with protocol lines removed.
pub fn visible_text(reply: &str) -> String {
    reply
        .lines()
        .filter(|l| {
            let t = l.trim_start().to_ascii_uppercase();
            !(t.starts_with("ACTION:") || t.starts_with("ACTION :") || t.starts_with("FINDING:"))
        })
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn strip_keyword<'a>(line: &'a str, keyword: &str) -> Option<&'a str> {
    let t = line.trim();
    if t.len() < keyword.len() || !t[..keyword.len()].eq_ignore_ascii_case(keyword) {
        return None;
    }
    let rest = t[keyword.len()..].trim_start();
    rest.strip_prefix(':').map(str::trim)
}

fn quoted_argument(rest: &str) -> Option<String> {
    let inner = rest.trim().strip_prefix('(')?.trim_end().strip_suffix(')')?.trim();
    let unquoted = inner
        .strip_prefix('"')
        .and_then(|s| s.strip_suffix('"'))
        .or_else(|| inner.strip_prefix('\'').and_then(|s| s.strip_suffix('\'')))
        .unwrap_or(inner);
    let arg = unquoted.trim();
    (!arg.is_empty()).then(|| arg.to_string())
}

fn parse_action_line(line: &str) -> Option<ActionKind> {
    let rest = strip_keyword(line, "ACTION")?;
    let verb_end = rest.find(|c: char| !c.is_ascii_alphabetic() && c != '_').unwrap_or(rest.len());
    let verb = rest[..verb_end].to_ascii_uppercase();
    let args = &rest[verb_end..];
    match verb.as_str() {
        "ASK" | "INQUIRE" => quoted_argument(args).map(ActionKind::InquireSymptom),
        "LABTEST" | "LAB_TEST" => quoted_argument(args).map(ActionKind::RequestInLabTest),
        "SENSOR" => quoted_argument(args).map(ActionKind::AccessSensorData),
        "DIAGNOSE" | "SUMMARIZE" if args.trim().is_empty() || args.trim() == "()" => {
            Some(ActionKind::SummarizeDiagnosis)
        }
        _ => None,
    }
}

const DIAGNOSIS_CUES: &[&str] = &["my diagnosis", "final diagnosis", "you most likely have", "the diagnosis is"];
const LAB_CUES: &[&str] = &["in-lab", "lab test", "blood test", "x-ray", "radiograph", "go to a clinic", "laboratory"];
const SENSOR_CUES: &[&str] = &["smartwatch", "wearable", "sensor data", "your watch", "fitness tracker"];

fn last_question(text: &str) -> Option<String> {
    let end = text.rfind('?')?;
    let start = text[..end]
        .rfind(['.', '!', '?', '\n'])
        .map_or(0, |i| i + 1);
    let q = text[start..=end].trim();
    (!q.is_empty()).then(|| q.to_string())
}

/// Keyword fallback for replies without an `ACTION:` line.
fn heuristic(reply: &str) -> Option<ActionKind> {
    let text = visible_text(reply);
    let lower = text.to_lowercase();
    if DIAGNOSIS_CUES.iter().any(|c| lower.contains(c)) {
        return Some(ActionKind::SummarizeDiagnosis);
    }
    if LAB_CUES.iter().any(|c| lower.contains(c)) {
        return Some(ActionKind::RequestInLabTest(text));
    }
    if SENSOR_CUES.iter().any(|c| lower.contains(c)) {
        return Some(ActionKind::AccessSensorData(last_question(&text).unwrap_or(text)));
    }
    last_question(&text).map(ActionKind::InquireSymptom)
}

/// The last well-formed `ACTION:` line wins; otherwise keyword heuristics.
pub fn parse_action(reply: &str) -> Option<Action> {
    if let Some(kind) = reply.lines().rev().find_map(parse_action_line) {
        return Some(Action {
            kind,
            raw_text: reply.to_string(),
            method: ParseMethod::ActionLine,
        });
    }
    heuristic(reply).map(|kind| Action {
        kind,
        raw_text: reply.to_string(),
        method: ParseMethod::Heuristic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedFinding {
    pub key: String,
    pub finding: Finding,
}

/// `FINDING: key = value [units] (patient|in-lab|sensor)`; the provenance
/// suffix defaults to `patient`.
pub fn parse_finding_line(line: &str) -> Option<ParsedFinding> {
    let rest = strip_keyword(line, "FINDING")?;
    let (key, value) = rest.split_once('=')?;
    let key = normalize_key(key);
    if key.is_empty() {
        return None;
    }
    let mut value = value.trim();
    let mut provenance = Provenance::PatientStated;
    if let Some(open) = value.rfind('(') {
        if value.ends_with(')') {
            if let Some(p) = Provenance::parse(&value[open + 1..value.len() - 1]) {
                provenance = p;
                value = value[..open].trim();
            }
        }
    }
    if value.is_empty() {
        return None;
    }
    Some(ParsedFinding {
        key,
        finding: Finding::new(FindingValue::parse(value), provenance),
    })
}

pub fn parse_findings(reply: &str) -> Vec<ParsedFinding> {
    reply.lines().filter_map(parse_finding_line).collect()
}
