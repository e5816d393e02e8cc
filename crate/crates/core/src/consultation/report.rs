use serde::{Deserialize, Serialize};

use super::probability::normalize;
use super::session::{CandidateDisease, SessionState};
use crate::guideline::{FindingSet, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitedFinding {
    pub key: String,
    pub value: String,
    pub provenance: Provenance,
    /// Sensor record ids backing the value.
    pub citations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub disease: String,
    pub final_prob: f64,
    pub prior_prob: f64,
    pub guideline_prob: f64,
    pub conclusion: Option<String>,
    /// Guideline nodes visited, root first.
    pub guideline_path: Vec<String>,
    pub findings: Vec<CitedFinding>,
    pub sensor_records: Vec<String>,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub session_id: String,
    pub patient_id: String,
    /// Reached by the turn limit or an explicit finalize, not by the doctor.
    pub forced: bool,
    pub turn: usize,
    /// Non-narrowed candidates, most likely first; probabilities sum to 1.
    pub entries: Vec<ReportEntry>,
    pub narrowed_out: Vec<String>,
    /// Narrowed candidates whose guideline the findings contradicted.
    #[serde(default)]
    pub ruled_out: Vec<RuledOut>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuledOut {
    pub disease: String,
    pub findings: Vec<CitedFinding>,
}

impl DiagnosisReport {
    pub fn top(&self) -> Option<&ReportEntry> {
        self.entries.first()
    }
}

fn cited_findings(c: &CandidateDisease, findings: &FindingSet) -> Vec<CitedFinding> {
    let Some(cursor) = &c.cursor else {
        return Vec::new();
    };
    cursor
        .evidence_keys()
        .into_iter()
        .filter_map(|k| {
            findings.get(k).map(|f| CitedFinding {
                key: k.to_string(),
                value: f.value.to_string(),
                provenance: f.provenance,
                citations: f.citations.clone(),
            })
        })
        .collect()
}

pub(crate) fn explain_candidate(c: &CandidateDisease, findings: &FindingSet) -> String {
    explain(c, c.final_prob, &cited_findings(c, findings))
}

fn describe(f: &CitedFinding) -> String {
    let mut p = format!("{} = {} ({})", f.key, f.value, f.provenance);
    if !f.citations.is_empty() {
        p.push_str(&format!(" from sensor records {}", f.citations.join(", ")));
    }
    p
}

fn explain(c: &CandidateDisease, p: f64, cited: &[CitedFinding]) -> String {
    let mut s = format!(
        "{}: final probability {p:.3} from prior {:.3} and guideline-based {:.3}.",
        c.disease, c.prior_prob, c.guideline_prob
    );
    match &c.cursor {
        None => s.push_str(" No guideline tree is available, so the estimate follows the prior."),
        Some(cursor) => {
            s.push_str(&format!(" Guideline path: {}.", cursor.path.join(" -> ")));
            if let Some(d) = cursor.conclusion() {
                s.push_str(&format!(" The guideline concluded: {d}."));
            } else if cursor.contradicted {
                s.push_str(" The findings rule this disease out along its guideline.");
            } else {
                s.push_str(&format!(
                    " {} of {} evidence nodes confirmed.",
                    cursor.satisfied_evidence, cursor.required_evidence
                ));
            }
        }
    }
    if !cited.is_empty() {
        let parts: Vec<String> = cited.iter().map(describe).collect();
        s.push_str(&format!(" Evidence: {}.", parts.join("; ")));
    }
    s
}

pub fn build_report(state: &SessionState, forced: bool) -> DiagnosisReport {
    let mut active: Vec<&CandidateDisease> = state.active().collect();
    active.sort_by(|a, b| b.final_prob.total_cmp(&a.final_prob).then_with(|| a.disease.cmp(&b.disease)));
    let probs = normalize(&active.iter().map(|c| c.final_prob).collect::<Vec<_>>());
    let ruled_out: Vec<RuledOut> = state
        .candidates
        .iter()
        .filter(|c| c.narrowed && c.cursor.as_ref().is_some_and(|k| k.contradicted))
        .map(|c| RuledOut {
            disease: c.disease.clone(),
            findings: cited_findings(c, &state.findings),
        })
        .collect();
    let mut entries: Vec<ReportEntry> = active
        .iter()
        .zip(probs)
        .map(|(c, p)| {
            let findings = cited_findings(c, &state.findings);
            let mut sensor_records: Vec<String> = Vec::new();
            for f in &findings {
                for id in &f.citations {
                    if !sensor_records.contains(id) {
                        sensor_records.push(id.clone());
                    }
                }
            }
            ReportEntry {
                disease: c.disease.clone(),
                final_prob: p,
                prior_prob: c.prior_prob,
                guideline_prob: c.guideline_prob,
                conclusion: c.cursor.as_ref().and_then(|k| k.conclusion()).map(str::to_string),
                guideline_path: c.cursor.as_ref().map(|k| k.path.clone()).unwrap_or_default(),
                explanation: explain(c, p, &findings),
                findings,
                sensor_records,
            }
        })
        .collect();
    // the leading entry also names what excluded its competitors
    if let Some(top) = entries.first_mut() {
        for r in ruled_out.iter().filter(|r| !r.findings.is_empty()) {
            let parts: Vec<String> = r.findings.iter().map(describe).collect();
            top.explanation
                .push_str(&format!(" {} was ruled out by {}.", r.disease, parts.join("; ")));
            for id in r.findings.iter().flat_map(|f| &f.citations) {
                if !top.sensor_records.contains(id) {
                    top.sensor_records.push(id.clone());
                }
            }
        }
    }
    DiagnosisReport {
        session_id: state.session_id.clone(),
        patient_id: state.patient_id.clone(),
        forced,
        turn: state.doctor_turns(),
        entries,
        narrowed_out: state
            .candidates
            .iter()
            .filter(|c| c.narrowed)
            .map(|c| c.disease.clone())
            .collect(),
        ruled_out,
    }
}
