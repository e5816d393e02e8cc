//! Structured findings from free-text patient messages.

use crate::gateway::{ChatMessage, ChatRole, Gateway, GatewayError};
use crate::guideline::{Finding, FindingValue, Provenance};
use crate::text::normalize_key;

use super::action::{parse_findings, ParsedFinding};

/// A finding key the active guidelines can use, with its expected form.
#[derive(Debug, Clone, PartialEq)]
pub struct FindingSlot {
    pub key: String,
    /// Question prompt or metric label.
    pub description: String,
    /// Enumerated answers for questions; empty for measurements.
    pub answers: Vec<String>,
    /// Units for measurements.
    pub units: Option<String>,
}

pub trait FindingExtractor: Send + Sync {
    fn extract(&self, message: &str, slots: &[FindingSlot]) -> Result<Vec<ParsedFinding>, GatewayError>;
}

/// Reads inline annotations `(key=value)` or `(key=value; in-lab)`.
/// Unannotated text yields nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnnotationExtractor;

fn annotation(body: &str) -> Option<ParsedFinding> {
    let (key, rest) = body.split_once('=')?;
    let key = normalize_key(key);
    if key.is_empty() || key.contains(' ') {
        return None;
    }
    let (value, provenance) = match rest.split_once(';') {
        Some((v, p)) => (v, Provenance::parse(p)?),
        None => (rest, Provenance::PatientStated),
    };
    let value = value.trim();
    if value.is_empty() {
        return None;
    }
    Some(ParsedFinding {
        key,
        finding: Finding::new(FindingValue::parse(value), provenance),
    })
}

pub fn parse_annotations(message: &str) -> Vec<ParsedFinding> {
    let mut out = Vec::new();
    let mut rest = message;
    while let Some(open) = rest.find('(') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(')') else { break };
        if let Some(f) = annotation(&after[..close]) {
            out.push(f);
        }
        rest = &after[close + 1..];
    }
    out
}

/// Strips annotations, leaving what the patient said.
pub fn strip_annotations(message: &str) -> String {
    let mut out = String::new();
    let mut rest = message;
    while let Some(open) = rest.find('(') {
        let after = &rest[open + 1..];
        let Some(close) = after.find(')') else { break };
        if annotation(&after[..close]).is_some() {
            out.push_str(&rest[..open]);
        } else {
            out.push_str(&rest[..open + 1 + close + 1]);
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl FindingExtractor for AnnotationExtractor {
    fn extract(&self, message: &str, _slots: &[FindingSlot]) -> Result<Vec<ParsedFinding>, GatewayError> {
        Ok(parse_annotations(message))
    }
}

/// Asks a chat model to map the message onto the known slots, answered as
/// `FINDING:` lines. Uses the summarizer role.
#[derive(Debug, Clone)]
pub struct LlmExtractor {
    gateway: Gateway,
}

impl LlmExtractor {
    pub fn new(gateway: Gateway) -> Self {
        Self { gateway }
    }

    pub fn messages(message: &str, slots: &[FindingSlot]) -> Vec<ChatMessage> {
        let mut keys = String::new();
        for s in slots {
            keys.push_str(&format!("- {}: {}", s.key, s.description));
            if !s.answers.is_empty() {
                keys.push_str(&format!(" (answer one of: {})", s.answers.join(", ")));
            }
            if let Some(u) = &s.units {
                keys.push_str(&format!(" (number in {u})"));
            }
            keys.push('\n');
        }
        vec![
            ChatMessage::system(
                "You read a patient's message and record only facts the patient clearly states. For each one \
                 write a line `FINDING: key = value`. Use only the listed keys. Write nothing if no key is covered.",
            ),
            ChatMessage::user(format!("Keys:\n{keys}\nPatient message: {message}")),
        ]
    }
}

impl FindingExtractor for LlmExtractor {
    fn extract(&self, message: &str, slots: &[FindingSlot]) -> Result<Vec<ParsedFinding>, GatewayError> {
        if slots.is_empty() {
            return Ok(Vec::new());
        }
        let reply = self.gateway.chat(ChatRole::Summarizer, Self::messages(message, slots))?;
        Ok(parse_findings(&reply.text)
            .into_iter()
            .filter(|f| slots.iter().any(|s| s.key == f.key))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations_parse_with_provenance() {
        let f = parse_annotations("It lasted a week (cough_weeks=1) and the lab said (spo2_percent=93 %; in-lab).");
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].key, "cough_weeks");
        assert_eq!(f[1].finding.provenance, Provenance::InLab);
        assert_eq!(f[1].finding.value, FindingValue::number(93.0, "%"));
    }

    #[test]
    fn ordinary_parentheses_are_kept() {
        assert!(parse_annotations("I feel tired (very tired)").is_empty());
        assert_eq!(strip_annotations("I feel tired (very tired) (fatigue=yes)"), "I feel tired (very tired)");
    }

    #[test]
    fn bad_provenance_rejected() {
        assert!(parse_annotations("(a=1; guess)").is_empty());
    }
}
