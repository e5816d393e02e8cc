use serde::{Deserialize, Serialize};

use super::{EvalError, Result};
use crate::consultation::{ActionKind, Speaker, TranscriptExport};
use crate::gateway::mock::completion;
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, ChatRole, Completion, Gateway};
use crate::guideline::{GuidelineTree, NodeKind};
use crate::text::normalize_key;

pub const SCORE_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub score: f64,
    pub explanation: String,
}

/// Judged quality of one dialogue. `overall` is always the local mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptScore {
    pub compliance: DimensionScore,
    pub sensor_utilization: DimensionScore,
    pub accuracy: DimensionScore,
    pub overall: f64,
}

impl GptScore {
    pub fn new(compliance: DimensionScore, sensor_utilization: DimensionScore, accuracy: DimensionScore) -> Result<Self> {
        for (name, d) in [
            ("compliance", &compliance),
            ("sensor utilization", &sensor_utilization),
            ("accuracy", &accuracy),
        ] {
            if !(0.0..=SCORE_MAX).contains(&d.score) {
                return Err(EvalError::Judge(format!("{name} score {} is outside 0..={SCORE_MAX}", d.score)));
            }
        }
        let overall = (compliance.score + sensor_utilization.score + accuracy.score) / 3.0;
        Ok(Self {
            compliance,
            sensor_utilization,
            accuracy,
            overall,
        })
    }
}

const JUDGE_SYSTEM: &str = "You grade diagnostic consultations between a doctor assistant and a patient. \
You receive the true disease, the diagnosis guideline for it and the full dialogue. Grade three dimensions \
from 0 to 10.\n\
Compliance: how closely the doctor followed the guideline's questions and tests.\n\
Sensor utilization: whether wearable data was consulted when useful, used when reliable and replaced by an \
in-lab test when unreliable.\n\
Accuracy: whether the final diagnosis matches the true disease.\n\
Answer with exactly three lines:\n\
Compliance: <score> - <reason>\n\
Sensor utilization: <score> - <reason>\n\
Accuracy: <score> - <reason>";

pub const JUDGE_REPROMPT: &str = "Please answer again using exactly the three lines \
`Compliance: <score> - <reason>`, `Sensor utilization: <score> - <reason>` and `Accuracy: <score> - <reason>`.";

pub const GROUND_TRUTH_HEADER: &str = "## True disease";
pub const GUIDELINE_HEADER: &str = "## Guideline";
pub const DIALOGUE_HEADER: &str = "## Dialogue";
pub const OUTCOME_HEADER: &str = "## Outcome";

/// Judge prompt: true disease, guideline text, role-tagged dialogue and a
/// factual outcome block.
pub fn judge_messages(transcript: &TranscriptExport, ground_truth: &str, guideline: Option<&GuidelineTree>) -> Vec<ChatMessage> {
    let mut user = format!("{GROUND_TRUTH_HEADER}\n{ground_truth}\n\n{GUIDELINE_HEADER}\n");
    match guideline {
        Some(t) => user.push_str(t.render().trim_end()),
        None => user.push_str("(no guideline available)"),
    }
    user.push_str(&format!("\n\n{DIALOGUE_HEADER}\n"));
    for u in &transcript.transcript {
        match (u.role, &u.action) {
            (Speaker::Doctor, Some(a)) => user.push_str(&format!("Doctor [{}]: {}\n", a.name(), dialogue_text(&u.text, a))),
            (Speaker::Doctor, None) => user.push_str(&format!("Doctor: {}\n", u.text)),
            (Speaker::Patient, _) => user.push_str(&format!("Patient: {}\n", u.text)),
        }
    }
    let performed = transcript.turns.iter().filter(|t| t.retrieval.performed).count();
    let unreliable = transcript
        .turns
        .iter()
        .filter(|t| t.retrieval.reliable == Some(false))
        .count();
    let labs = transcript
        .turns
        .iter()
        .filter(|t| matches!(t.action, ActionKind::RequestInLabTest(_)))
        .count();
    user.push_str(&format!(
        "\n{OUTCOME_HEADER}\nFinal diagnosis: {}\nSensor retrievals: {performed}\nUnreliable sensor retrievals: {unreliable}\nIn-lab test requests: {labs}\n",
        transcript.final_diagnosis().unwrap_or("none"),
    ));
    vec![ChatMessage::system(JUDGE_SYSTEM), ChatMessage::user(user)]
}

fn dialogue_text(visible: &str, a: &ActionKind) -> String {
    let arg = a.argument().unwrap_or_default();
    if visible.trim().is_empty() {
        arg.to_string()
    } else if !arg.is_empty() && !visible.contains(arg) {
        format!("{visible} ({arg})")
    } else {
        visible.to_string()
    }
}

fn leading_number(s: &str) -> Option<(f64, &str)> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .find(|(_, c)| !(c.is_ascii_digit() || *c == '.'))
        .map_or(s.len(), |(i, _)| i);
    let v: f64 = s[..end].parse().ok()?;
    let mut rest = &s[end..];
    if let Some(r) = rest.trim_start().strip_prefix("/10") {
        rest = r;
    }
    Some((v, rest))
}

/// Parses the three `Dimension: score - reason` lines in any order.
pub fn parse_judge_reply(reply: &str) -> Option<(DimensionScore, DimensionScore, DimensionScore)> {
    let mut dims: [Option<DimensionScore>; 3] = [None, None, None];
    for line in reply.lines() {
        let Some((name, rest)) = line.split_once(':') else {
            continue;
        };
        let name = normalize_key(name.trim_start_matches(['*', '-', ' ', '#']).trim_end_matches('*'));
        let slot = match name.as_str() {
            "compliance" => 0,
            "sensor utilization" | "sensor data utilization" | "sensor_utilization" => 1,
            "accuracy" => 2,
            _ => continue,
        };
        let Some((score, tail)) = leading_number(rest.trim_start_matches('*')) else {
            continue;
        };
        if !(0.0..=SCORE_MAX).contains(&score) {
            continue;
        }
        let explanation = tail
            .trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '-' | '–' | ':' | '|' | '.' | ','))
            .trim()
            .to_string();
        dims[slot] = Some(DimensionScore { score, explanation });
    }
    let [Some(c), Some(s), Some(a)] = dims else {
        return None;
    };
    Some((c, s, a))
}

/// One judge call, one re-prompt on an unparseable reply.
pub fn score_dialogue(
    judge: &Gateway,
    transcript: &TranscriptExport,
    ground_truth: &str,
    guideline: Option<&GuidelineTree>,
) -> Result<GptScore> {
    let mut messages = judge_messages(transcript, ground_truth, guideline);
    let first = judge.chat(ChatRole::Judge, messages.clone())?.text;
    if let Some((c, s, a)) = parse_judge_reply(&first) {
        return GptScore::new(c, s, a);
    }
    messages.push(ChatMessage::assistant(first));
    messages.push(ChatMessage::user(JUDGE_REPROMPT));
    let second = judge.chat(ChatRole::Judge, messages)?.text;
    let (c, s, a) = parse_judge_reply(&second).ok_or_else(|| EvalError::Judge(format!("unparseable judge reply: {second:?}")))?;
    GptScore::new(c, s, a)
}

fn section<'a>(prompt: &'a str, header: &str) -> &'a str {
    let Some(start) = prompt.find(header) else {
        return "";
    };
    let body = &prompt[start + header.len()..];
    let end = body.find("\n## ").unwrap_or(body.len());
    body[..end].trim()
}

fn outcome_value<'a>(outcome: &'a str, label: &str) -> &'a str {
    outcome
        .lines()
        .find_map(|l| l.strip_prefix(label).and_then(|r| r.strip_prefix(':')))
        .map_or("", str::trim)
}

/// Offline judge applying a fixed rubric to the judge prompt.
///
/// * compliance: 10 times the share of the guideline's question prompts the
///   doctor asked, 10 when the guideline has none;
/// * sensor utilization: 0 without retrievals, 10 when every retrieval was
///   reliable, 7 when unreliable data was followed by an in-lab request,
///   3 otherwise;
/// * accuracy: 10 when the final diagnosis names the true disease, else 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct RubricJudge;

impl RubricJudge {
    pub fn grade(prompt: &str) -> (f64, f64, f64) {
        let truth = section(prompt, GROUND_TRUTH_HEADER);
        let guideline = section(prompt, GUIDELINE_HEADER);
        let dialogue = section(prompt, DIALOGUE_HEADER).to_lowercase();
        let outcome = section(prompt, OUTCOME_HEADER);
        let questions: Vec<String> = guideline
            .lines()
            .filter_map(|l| {
                let (_, rest) = l.split_once("] ASK ")?;
                let (_, q) = rest.split_once(": ")?;
                Some(q.trim().to_lowercase())
            })
            .collect();
        let compliance = if questions.is_empty() {
            SCORE_MAX
        } else {
            let asked = questions.iter().filter(|q| dialogue.contains(q.as_str())).count();
            (SCORE_MAX * asked as f64 / questions.len() as f64).round()
        };
        let n = |label: &str| outcome_value(outcome, label).parse::<usize>().unwrap_or(0);
        let (retrievals, unreliable, labs) = (
            n("Sensor retrievals"),
            n("Unreliable sensor retrievals"),
            n("In-lab test requests"),
        );
        let sensor = if retrievals == 0 {
            0.0
        } else if unreliable == 0 {
            SCORE_MAX
        } else if labs > 0 {
            7.0
        } else {
            3.0
        };
        let diagnosis = normalize_key(outcome_value(outcome, "Final diagnosis"));
        let accuracy = if !truth.is_empty() && diagnosis == normalize_key(truth) {
            SCORE_MAX
        } else {
            0.0
        };
        (compliance, sensor, accuracy)
    }
}

impl ChatBackend for RubricJudge {
    fn complete(&self, request: &ChatRequest) -> crate::gateway::Result<Completion> {
        let prompt = request
            .messages
            .iter()
            .rev()
            .find(|m| m.content.contains(GROUND_TRUTH_HEADER))
            .map_or("", |m| m.content.as_str());
        let (c, s, a) = Self::grade(prompt);
        let text = format!(
            "Compliance: {c} - rubric share of guideline questions asked\n\
             Sensor utilization: {s} - rubric grade of sensor use\n\
             Accuracy: {a} - rubric match of final diagnosis"
        );
        Ok(completion(request, text))
    }
}

/// Question prompts of a tree, in node order.
pub fn guideline_questions(tree: &GuidelineTree) -> Vec<&str> {
    tree.nodes()
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Question { prompt, .. } => Some(prompt.as_str()),
            _ => None,
        })
        .collect()
}
