//! Preceding and runtime prompt assembly.
//!
//! The preceding prompt is rendered once per session and sent as the system
//! message of every doctor call. The runtime prompt is rebuilt every turn and
//! always has exactly four sections, in this order:
//!
//! ```text
//! ### Patient statement
//! ### Medical knowledge
//! ### Guidelines
//! ### Sensor knowledge
//! ```

use serde::{Deserialize, Serialize};

pub const OVERALL_HEADER: &str = "### Overall instruction";
pub const TASK_HEADER: &str = "### Task instruction";
pub const GUIDELINES_HEADER: &str = "### Diagnosis guidelines";
pub const DEMOS_HEADER: &str = "### Dialogue demonstrations";

pub const SYM_HEADER: &str = "### Patient statement";
pub const MED_HEADER: &str = "### Medical knowledge";
pub const RUNTIME_GUIDELINES_HEADER: &str = "### Guidelines";
pub const SENSOR_HEADER: &str = "### Sensor knowledge";

pub const RUNTIME_HEADERS: [&str; 4] = [SYM_HEADER, MED_HEADER, RUNTIME_GUIDELINES_HEADER, SENSOR_HEADER];

/// Present in the sensor section iff the previous turn's sensor knowledge is
/// unreliable.
pub const UNRELIABLE_TAG: &str = "[UNRELIABLE SENSOR DATA]";

pub const NONE_RETRIEVED: &str = "(none)";

pub const DEFAULT_OVERALL_INSTRUCTION: &str = "You are a physician holding a consultation with a patient over several \
turns. Ask one focused thing at a time, keep your language plain, and work toward a diagnosis that the evidence \
supports.";

pub const DEFAULT_TASK_INSTRUCTION: &str = "Each turn you receive the patient's latest statement, retrieved medical \
knowledge, the progress of every candidate disease along its diagnosis guideline, and any sensor knowledge gathered \
on the previous turn. Follow the guidelines to decide what to establish next.\n\
Sensor knowledge marked [UNRELIABLE SENSOR DATA] must not be used as evidence; ask the patient for an in-lab test \
instead. Sensor knowledge without that mark may be relied on.\n\
You may record facts the patient established with lines of the form\n\
FINDING: key = value [units] (patient|in-lab)\n\
using the keys shown in the guidelines. End every reply with exactly one line, one of\n\
ACTION: ASK(\"question for the patient\")\n\
ACTION: LABTEST(\"test the patient should take\")\n\
ACTION: SENSOR(\"what to look up in the patient's wearable data\")\n\
ACTION: DIAGNOSE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecedingPrompt {
    pub overall_instruction: String,
    pub task_instruction: String,
    pub guideline_texts: Vec<String>,
    pub dialogue_demonstrations: Vec<String>,
}

fn section(out: &mut String, header: &str, body: &str) {
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(header);
    out.push('\n');
    let body = body.trim_end();
    out.push_str(if body.is_empty() { NONE_RETRIEVED } else { body });
    out.push('\n');
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, t)| format!("[{}]\n{}", i + 1, t.trim_end()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl PrecedingPrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        section(&mut out, OVERALL_HEADER, &self.overall_instruction);
        section(&mut out, TASK_HEADER, &self.task_instruction);
        section(&mut out, GUIDELINES_HEADER, &self.guideline_texts.join("\n"));
        section(&mut out, DEMOS_HEADER, &numbered(&self.dialogue_demonstrations));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimePrompt {
    pub sym: String,
    pub med_knowledge: Vec<String>,
    pub guidelines: String,
    pub sensor_knowledge_prev: Option<String>,
    pub unreliable: bool,
}

impl RuntimePrompt {
    pub fn render(&self) -> String {
        let mut out = String::new();
        section(&mut out, SYM_HEADER, &self.sym);
        section(&mut out, MED_HEADER, &numbered(&self.med_knowledge));
        section(&mut out, RUNTIME_GUIDELINES_HEADER, &self.guidelines);
        let mut sensor = self.sensor_knowledge_prev.clone().unwrap_or_default();
        if self.unreliable {
            sensor = format!("{UNRELIABLE_TAG}\n{sensor}");
        }
        section(&mut out, SENSOR_HEADER, &sensor);
        out
    }
}

/// Section bodies of a rendered runtime prompt, or the reason it is
/// malformed. Used to check the four-part composition.
pub fn split_runtime(text: &str) -> Result<[String; 4], String> {
    let mut bodies: Vec<String> = Vec::new();
    let mut headers: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.starts_with("### ") {
            headers.push(line);
            bodies.push(String::new());
        } else if let Some(b) = bodies.last_mut() {
            if !b.is_empty() {
                b.push('\n');
            }
            b.push_str(line);
        } else if !line.trim().is_empty() {
            return Err(format!("text before the first section: {line:?}"));
        }
    }
    if headers != RUNTIME_HEADERS {
        return Err(format!("sections {headers:?}, expected {RUNTIME_HEADERS:?}"));
    }
    let bodies: Vec<String> = bodies.into_iter().map(|b| b.trim_end().to_string()).collect();
    Ok(bodies.try_into().expect("four sections"))
}
