use std::sync::{Arc, RwLock, RwLockReadGuard};

use serde::{Deserialize, Serialize};

use super::action::{parse_action, parse_findings, visible_text, Action, ActionKind, ParseMethod, ParsedFinding};
use super::extract::{strip_annotations, AnnotationExtractor, FindingExtractor, FindingSlot};
use super::probability::{
    compute_prior, fuse_deterministic, fuse_with_llm, guideline_probability, normalize, surviving, Demographics,
    FusionMode,
};
use super::prompt::{PrecedingPrompt, RuntimePrompt};
use super::report::{build_report, explain_candidate, DiagnosisReport};
use super::session::{
    CandidateDisease, Phase, ProbabilityPoint, RetrievalLogEntry, SensorMode, SessionState, Speaker, TurnRecord,
    Utterance,
};
use super::{ConsentRegistry, ConsultationConfig, ConsultationError, Result};
use crate::gateway::{ChatMessage, ChatRole, Gateway};
use crate::guideline::{Finding, FindingValue, GuidelineTree, NodeKind, Provenance, TreeCursor};
use crate::knowledge::KnowledgeBase;
use crate::sensor::{retrieve_sensor_context, summarize_sensor, SensorKnowledge};
use crate::text::normalize_key;

/// Sent once when a doctor reply carries no recognizable action.
pub const REPROMPT: &str = "Your reply did not end with a usable ACTION line. Send the reply again and finish it \
with exactly one ACTION line in the format from the task instruction.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub turn: usize,
    pub doctor_message: String,
    pub action: ActionKind,
    pub parse_method: ParseMethod,
    pub candidates: Vec<CandidateDisease>,
    pub retrieval_info: RetrievalLogEntry,
    /// Knowledge the next runtime prompt will carry.
    pub sensor_knowledge: Option<SensorKnowledge>,
    pub phase: Phase,
    pub report: Option<DiagnosisReport>,
    pub runtime_prompt: String,
}

/// Runs consultations against a shared knowledge base. Cheap to clone.
#[derive(Clone)]
pub struct Engine {
    kb: Arc<RwLock<KnowledgeBase>>,
    gateway: Gateway,
    config: ConsultationConfig,
    extractor: Arc<dyn FindingExtractor>,
    consent: Arc<ConsentRegistry>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(kb: Arc<RwLock<KnowledgeBase>>, gateway: Gateway, config: ConsultationConfig) -> Result<Self> {
        config.validate()?;
        let consent = Arc::new(ConsentRegistry::new(config.sensor_consent_default));
        Ok(Self {
            kb,
            gateway,
            config,
            extractor: Arc::new(AnnotationExtractor),
            consent,
        })
    }

    pub fn with_extractor(mut self, extractor: Arc<dyn FindingExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn with_consent(mut self, consent: Arc<ConsentRegistry>) -> Self {
        self.consent = consent;
        self
    }

    pub fn config(&self) -> &ConsultationConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn knowledge(&self) -> &Arc<RwLock<KnowledgeBase>> {
        &self.kb
    }

    pub fn consent(&self) -> &Arc<ConsentRegistry> {
        &self.consent
    }

    fn read_kb(&self) -> RwLockReadGuard<'_, KnowledgeBase> {
        self.kb.read().unwrap_or_else(|p| p.into_inner())
    }

    /// Preceding stage: candidate mapping, guideline retrieval, priors,
    /// demonstrations and the fixed preceding prompt. Records `sym0` as the
    /// first patient utterance without calling the doctor.
    pub fn begin_session(
        &self,
        session_id: &str,
        patient_id: &str,
        sym0: &str,
        demographics: Demographics,
    ) -> Result<SessionState> {
        if sym0.trim().is_empty() {
            return Err(ConsultationError::Precondition("first symptom statement is empty".into()));
        }
        let kb = self.read_kb();
        let embedder = self.gateway.embedder();
        let sym = strip_annotations(sym0);
        let seeds = kb
            .symptoms
            .map_symptoms(embedder, &sym, self.config.map_k, self.config.seed_scoring)?;
        let retrieval = kb.library.retrieve(&seeds);
        let names: Vec<&str> = seeds.iter().map(|s| s.disease.as_str()).collect();
        let demo_probs = kb.incidence.demographics_probs(&names, &demographics);
        let candidates = seeds
            .iter()
            .zip(&demo_probs)
            .map(|(seed, &demo)| {
                let prior = compute_prior(seed.symptom_similarity, demo, self.config.prior_weight);
                new_candidate(&kb, &seed.disease, seed.symptom_similarity, demo, prior, 0)
            })
            .collect();
        let demos = kb.dialogue_demonstrations(embedder, &sym, self.config.demo_k, self.config.demo_threshold)?;
        let preceding = PrecedingPrompt {
            overall_instruction: self.config.overall_instruction.clone(),
            task_instruction: self.config.task_instruction.clone(),
            guideline_texts: retrieval.trees.iter().map(|t| t.render()).collect(),
            dialogue_demonstrations: demos.into_iter().map(|d| d.text).collect(),
        };
        let mut state = SessionState {
            session_id: session_id.to_string(),
            patient_id: patient_id.to_string(),
            demographics,
            phase: Phase::Preceding,
            transcript: vec![Utterance {
                index: 0,
                role: Speaker::Patient,
                text: sym0.to_string(),
                action: None,
            }],
            statements: vec![sym],
            findings: Default::default(),
            candidates,
            preceding_prompt: preceding.render(),
            preceding,
            sensor_knowledge: None,
            turns: Vec::new(),
            missing_guidelines: retrieval.missing,
            report: None,
        };
        self.refresh(&kb, &mut state);
        state.phase = Phase::Consulting;
        Ok(state)
    }

    /// Preceding stage plus the first doctor turn on `sym0`.
    pub fn start(
        &self,
        session_id: &str,
        patient_id: &str,
        sym0: &str,
        demographics: Demographics,
    ) -> Result<(SessionState, TurnResult)> {
        let mut state = self.begin_session(session_id, patient_id, sym0, demographics)?;
        let result = self.run_turn(&mut state, None)?;
        Ok((state, result))
    }

    /// One consultation turn. On error `state` is left exactly as it was.
    pub fn step(&self, state: &mut SessionState, patient_msg: &str) -> Result<TurnResult> {
        if patient_msg.trim().is_empty() {
            return Err(ConsultationError::Precondition("patient message is empty".into()));
        }
        self.run_turn(state, Some(patient_msg))
    }

    /// Concludes the session if needed and returns its report.
    pub fn finalize(&self, state: &mut SessionState) -> DiagnosisReport {
        if let (Phase::Concluded, Some(r)) = (state.phase, &state.report) {
            return r.clone();
        }
        state.phase = Phase::Concluded;
        let report = build_report(state, true);
        state.report = Some(report.clone());
        report
    }

    fn run_turn(&self, state: &mut SessionState, patient_msg: Option<&str>) -> Result<TurnResult> {
        match state.phase {
            Phase::Consulting => {}
            Phase::Concluded => return Err(ConsultationError::Concluded(state.session_id.clone())),
            Phase::Preceding => {
                return Err(ConsultationError::Precondition("session has not finished its preceding stage".into()))
            }
        }
        let kb = self.read_kb();
        let embedder = self.gateway.embedder();
        let mut s = state.clone();
        let turn = s.turns.len() + 1;

        if let Some(msg) = patient_msg {
            let index = s.transcript.len();
            s.transcript.push(Utterance {
                index,
                role: Speaker::Patient,
                text: msg.to_string(),
                action: None,
            });
            s.statements.push(strip_annotations(msg));
        }
        let raw_msg = s
            .transcript
            .iter()
            .rev()
            .find(|u| u.role == Speaker::Patient)
            .map(|u| u.text.clone())
            .unwrap_or_default();
        let sym = s.statements.last().cloned().unwrap_or_default();

        let mut added = Vec::new();
        let mut rejected = Vec::new();
        let slots = finding_slots(&kb, &s);
        let extracted = self
            .extractor
            .extract(&raw_msg, &slots)
            .map_err(ConsultationError::Provider)?;
        for f in extracted {
            admit_finding(&kb, &mut s, f, &mut added, &mut rejected);
        }
        // SensorKnow(i-1) feeds the guidelines only when reliable
        if let Some(k) = s.sensor_knowledge.clone().filter(|k| k.reliable) {
            for r in &k.readings {
                let f = ParsedFinding {
                    key: r.metric.clone(),
                    finding: Finding::new(FindingValue::number(r.mean, r.units.clone()), Provenance::Sensor)
                        .cited(r.record_ids.clone()),
                };
                admit_finding(&kb, &mut s, f, &mut added, &mut rejected);
            }
        }

        self.update_candidate_trees(&kb, &mut s, turn)?;
        let mut fallback = self.refresh(&kb, &mut s);

        let med = kb.medical_knowledge(embedder, &sym, self.config.med_k, self.config.med_threshold)?;
        let runtime = RuntimePrompt {
            sym: sym.clone(),
            med_knowledge: med.iter().map(|p| p.text.clone()).collect(),
            guidelines: guidelines_section(&kb, &s),
            sensor_knowledge_prev: s.sensor_knowledge.as_ref().map(|k| k.summary.clone()),
            unreliable: s.sensor_knowledge.as_ref().is_some_and(|k| !k.reliable),
        };
        let runtime_prompt = runtime.render();

        let mut messages = vec![ChatMessage::system(s.preceding_prompt.clone())];
        for t in &s.turns {
            messages.push(ChatMessage::user(t.patient_message.clone()));
            messages.push(ChatMessage::assistant(t.raw_reply.clone()));
        }
        messages.push(ChatMessage::user(runtime_prompt.clone()));
        let (raw_reply, action, reprompted) = self.ask_doctor(messages)?;

        for f in parse_findings(&raw_reply) {
            admit_finding(&kb, &mut s, f, &mut added, &mut rejected);
        }

        let doctor_message = visible_text(&raw_reply);
        let query = match &action.kind {
            ActionKind::AccessSensorData(q) if !q.trim().is_empty() => q.clone(),
            _ if !doctor_message.is_empty() => doctor_message.clone(),
            other => other.to_line(),
        };
        let consent = self.consent.get(&s.patient_id);
        let mode = if consent { self.config.sensor_mode } else { SensorMode::Disabled };
        let (filter, retrieve) = match mode {
            SensorMode::Disabled => (None, false),
            SensorMode::Always => (None, true),
            SensorMode::Filtered => match &kb.filter {
                Some(model) => {
                    let d = model.should_retrieve(embedder, &query);
                    (Some(d), d.retrieve)
                }
                // without a trained filter only explicit sensor actions retrieve
                None => (None, matches!(action.kind, ActionKind::AccessSensorData(_))),
            },
        };
        let mut entry = RetrievalLogEntry::skipped(turn, mode, consent, (mode != SensorMode::Disabled).then(|| query.clone()));
        entry.filter = filter;
        s.sensor_knowledge = None;
        if retrieve {
            let ctx = retrieve_sensor_context(
                &kb.store,
                &kb.sensors,
                embedder,
                &query,
                &s.patient_id,
                self.config.sensor_k,
                self.config.sensor_threshold,
                self.config.reliability_threshold,
            )?;
            entry.performed = true;
            entry.windows = ctx.windows.len();
            if !ctx.is_empty() {
                let k = summarize_sensor(&self.gateway, &query, &ctx, &kb.sensors, self.config.reliability_threshold)?;
                entry.min_uncertainty = Some(k.min_uncertainty);
                entry.reliable = Some(k.reliable);
                entry.record_ids = k.citations().into_iter().map(str::to_string).collect();
                s.sensor_knowledge = Some(k);
            }
        }

        if !added.is_empty() {
            fallback |= self.refresh(&kb, &mut s);
        }

        let index = s.transcript.len();
        s.transcript.push(Utterance {
            index,
            role: Speaker::Doctor,
            text: doctor_message.clone(),
            action: Some(action.kind.clone()),
        });
        s.turns.push(TurnRecord {
            turn,
            patient_message: raw_msg,
            runtime_prompt: runtime_prompt.clone(),
            raw_reply,
            doctor_message: doctor_message.clone(),
            action: action.kind.clone(),
            parse_method: action.method,
            reprompted,
            findings_added: added,
            findings_rejected: rejected,
            med_knowledge_sources: med.iter().map(|p| p.source_id.clone()).collect(),
            retrieval: entry.clone(),
            probabilities: s
                .candidates
                .iter()
                .map(|c| ProbabilityPoint {
                    disease: c.disease.clone(),
                    prior_prob: c.prior_prob,
                    guideline_prob: c.guideline_prob,
                    final_prob: c.final_prob,
                    narrowed: c.narrowed,
                })
                .collect(),
            llm_fusion_fallback: fallback,
        });

        if action.kind == ActionKind::SummarizeDiagnosis {
            s.phase = Phase::Concluded;
            s.report = Some(build_report(&s, false));
        } else if turn >= self.config.max_turns {
            s.phase = Phase::Concluded;
            s.report = Some(build_report(&s, true));
        }

        let result = TurnResult {
            turn,
            doctor_message,
            action: action.kind,
            parse_method: action.method,
            candidates: s.candidates.clone(),
            retrieval_info: entry,
            sensor_knowledge: s.sensor_knowledge.clone(),
            phase: s.phase,
            report: s.report.clone(),
            runtime_prompt,
        };
        *state = s;
        Ok(result)
    }

    fn ask_doctor(&self, mut messages: Vec<ChatMessage>) -> Result<(String, Action, bool)> {
        let first = self
            .gateway
            .chat(ChatRole::Doctor, messages.clone())
            .map_err(ConsultationError::Provider)?
            .text;
        if let Some(a) = parse_action(&first) {
            return Ok((first, a, false));
        }
        tracing::warn!("doctor reply without an action; re-prompting once");
        messages.push(ChatMessage::assistant(first));
        messages.push(ChatMessage::user(REPROMPT));
        let second = self
            .gateway
            .chat(ChatRole::Doctor, messages)
            .map_err(ConsultationError::Provider)?
            .text;
        match parse_action(&second) {
            Some(a) => Ok((second, a, true)),
            None => Err(ConsultationError::MalformedAction { reply: second }),
        }
    }

    /// Re-maps all patient statements so far. Remaining diseases keep their
    /// cursors, departed ones are dropped, new ones start fresh with a prior
    /// fixed now. Narrowed-out diseases never come back.
    pub fn update_candidate_trees(&self, kb: &KnowledgeBase, s: &mut SessionState, turn: usize) -> Result<()> {
        let text = s.statements.join(" ");
        let seeds = kb.symptoms.map_symptoms(
            self.gateway.embedder(),
            &text,
            self.config.map_k,
            self.config.seed_scoring,
        )?;
        let keys: Vec<String> = seeds.iter().map(|x| normalize_key(&x.disease)).collect();
        // a candidate with guideline progress survives remapping
        let eps = self.config.epsilon;
        s.candidates
            .retain(|c| c.narrowed || c.guideline_prob > eps || keys.contains(&normalize_key(&c.disease)));
        let fresh: Vec<_> = seeds
            .iter()
            .filter(|seed| s.candidate(&seed.disease).is_none())
            .cloned()
            .collect();
        if fresh.is_empty() {
            return Ok(());
        }
        let mut names: Vec<String> = s.active().map(|c| c.disease.clone()).collect();
        names.extend(fresh.iter().map(|f| f.disease.clone()));
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let demo = kb.incidence.demographics_probs(&refs, &s.demographics);
        let offset = names.len() - fresh.len();
        for (i, seed) in fresh.iter().enumerate() {
            let d = demo[offset + i];
            let prior = compute_prior(seed.symptom_similarity, d, self.config.prior_weight);
            if kb.library.get(&seed.disease).is_none() && !s.missing_guidelines.contains(&seed.disease) {
                s.missing_guidelines.push(seed.disease.clone());
            }
            s.candidates
                .push(new_candidate(kb, &seed.disease, seed.symptom_similarity, d, prior, turn));
        }
        Ok(())
    }

    /// Advances cursors, recomputes guideline and final probabilities and
    /// narrows. Returns true when llm fusion fell back to the formula.
    fn refresh(&self, kb: &KnowledgeBase, s: &mut SessionState) -> bool {
        for c in s.candidates.iter_mut().filter(|c| !c.narrowed) {
            let tree = kb.library.get(&c.disease);
            if let (Some(cursor), Some(t)) = (c.cursor.as_mut(), tree) {
                if let Err(e) = cursor.evaluate_step(t, &s.findings) {
                    tracing::warn!(disease = %c.disease, error = %e, "guideline step failed; cursor kept");
                }
            }
            c.guideline_prob =
                guideline_probability(c.cursor.as_ref(), tree.map(|t| t.as_ref()), c.prior_prob, self.config.epsilon);
        }
        let active: Vec<usize> = (0..s.candidates.len()).filter(|&i| !s.candidates[i].narrowed).collect();
        if active.is_empty() {
            return false;
        }
        let priors: Vec<f64> = active.iter().map(|&i| s.candidates[i].prior_prob).collect();
        let guides: Vec<f64> = active.iter().map(|&i| s.candidates[i].guideline_prob).collect();
        let (finals, fallback) = match self.config.fusion {
            FusionMode::Deterministic => (fuse_deterministic(&priors, &guides, self.config.alpha), false),
            FusionMode::Llm => {
                let names: Vec<&str> = active.iter().map(|&i| s.candidates[i].disease.as_str()).collect();
                fuse_with_llm(&self.gateway, &names, &priors, &guides, self.config.alpha)
            }
        };
        let mut keep = surviving(&finals, self.config.prune_threshold);
        // a guideline that rules its disease out narrows it, unless nothing would remain
        let open: Vec<usize> = keep
            .iter()
            .copied()
            .filter(|&j| !s.candidates[active[j]].cursor.as_ref().is_some_and(|k| k.contradicted))
            .collect();
        if !open.is_empty() {
            keep = open;
        }
        let kept: Vec<f64> = keep.iter().map(|&j| finals[j]).collect();
        let renorm = normalize(&kept);
        for (j, &i) in active.iter().enumerate() {
            let c = &mut s.candidates[i];
            match keep.iter().position(|&k| k == j) {
                Some(pos) => c.final_prob = renorm[pos],
                None => {
                    c.narrowed = true;
                    c.final_prob = 0.0;
                }
            }
        }
        for c in s.candidates.iter_mut() {
            c.explanation = explain_candidate(c, &s.findings);
        }
        fallback
    }
}

fn new_candidate(
    kb: &KnowledgeBase,
    disease: &str,
    similarity: f64,
    demo: f64,
    prior: f64,
    since_turn: usize,
) -> CandidateDisease {
    let tree = kb.library.get(disease);
    CandidateDisease {
        disease: tree.map_or_else(|| disease.to_string(), |t| t.disease().to_string()),
        symptom_similarity: similarity,
        demographics_prob: demo,
        prior_prob: prior,
        guideline_prob: prior,
        final_prob: 0.0,
        cursor: tree.map(|t| TreeCursor::new(t)),
        narrowed: false,
        since_turn,
        explanation: String::new(),
    }
}

fn active_trees<'a>(kb: &'a KnowledgeBase, s: &SessionState) -> Vec<&'a GuidelineTree> {
    s.active()
        .filter_map(|c| kb.library.get(&c.disease))
        .map(|t| t.as_ref())
        .collect()
}

/// Keys the active guidelines can consume, for the finding extractor.
fn finding_slots(kb: &KnowledgeBase, s: &SessionState) -> Vec<FindingSlot> {
    let mut slots: Vec<FindingSlot> = Vec::new();
    let mut push = |slot: FindingSlot| {
        if !slots.iter().any(|x| x.key == slot.key) {
            slots.push(slot);
        }
    };
    for tree in active_trees(kb, s) {
        for m in tree.metrics() {
            push(FindingSlot {
                key: m.name.clone(),
                description: m.name.replace('_', " "),
                answers: Vec::new(),
                units: Some(m.units.clone()),
            });
        }
        for n in tree.nodes() {
            match &n.kind {
                NodeKind::Question {
                    finding,
                    prompt,
                    answers,
                } => push(FindingSlot {
                    key: finding.clone(),
                    description: prompt.clone(),
                    answers: answers.keys().cloned().collect(),
                    units: None,
                }),
                NodeKind::InLabTest {
                    test,
                    finding: Some(f),
                    ..
                } => push(FindingSlot {
                    key: f.clone(),
                    description: format!("result of the in-lab test: {test}"),
                    answers: Vec::new(),
                    units: None,
                }),
                _ => {}
            }
        }
    }
    slots
}

/// Fills missing units from the active trees' metric vocabulary and rejects
/// numbers in foreign units before they reach a cursor.
fn admit_finding(
    kb: &KnowledgeBase,
    s: &mut SessionState,
    mut f: ParsedFinding,
    added: &mut Vec<String>,
    rejected: &mut Vec<String>,
) {
    let decls: Vec<String> = active_trees(kb, s)
        .iter()
        .filter_map(|t| t.metric(&f.key).map(|m| m.units.clone()))
        .collect();
    if !decls.is_empty() {
        match &mut f.finding.value {
            FindingValue::Number { units, .. } if units.is_empty() => {
                if decls.iter().all(|u| u == &decls[0]) {
                    *units = decls[0].clone();
                } else {
                    rejected.push(format!("{}: ambiguous units", f.key));
                    return;
                }
            }
            FindingValue::Number { units, .. } if !decls.contains(units) => {
                rejected.push(format!("{}: units {units} not one of {}", f.key, decls.join(", ")));
                return;
            }
            FindingValue::Number { .. } => {}
            other => {
                rejected.push(format!("{}: expected a number, got {other}", f.key));
                return;
            }
        }
    }
    let key = f.key.clone();
    if s.findings.record(&key, f.finding) && !added.contains(&key) {
        added.push(key);
    }
}

/// Guidelines(i): one status line per active candidate, followed by the
/// full text of trees that joined after the preceding stage.
fn guidelines_section(kb: &KnowledgeBase, s: &SessionState) -> String {
    let mut active: Vec<&CandidateDisease> = s.active().collect();
    active.sort_by(|a, b| b.final_prob.total_cmp(&a.final_prob).then_with(|| a.disease.cmp(&b.disease)));
    let mut lines: Vec<String> = active
        .iter()
        .map(|c| {
            let head = format!("- {} (p={:.3})", c.disease, c.final_prob);
            match &c.cursor {
                None => format!("{head}: no guideline tree available"),
                Some(k) if k.contradicted => match &k.pending {
                    Some(p) => format!("{head}: findings rule this disease out; {p}"),
                    None => format!("{head}: findings rule this disease out"),
                },
                Some(k) => {
                    let mut line = format!("{head}: {}/{} evidence nodes confirmed", k.satisfied_evidence, k.required_evidence);
                    if let Some(p) = &k.pending {
                        line.push_str(&format!("; next: {p}"));
                    }
                    line
                }
            }
        })
        .collect();
    for c in active.iter().filter(|c| c.since_turn > 0) {
        if let Some(t) = kb.library.get(&c.disease) {
            lines.push(String::new());
            lines.push(t.render().trim_end().to_string());
        }
    }
    lines.join("\n")
}
