use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::dsl::{GuidelineNode, GuidelineTree, NodeKind, Predicate};
use super::findings::{FindingSet, FindingValue, Provenance};
use super::GuidelineError;
use crate::text::normalize_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum StepOutcome {
    NeedAnswer {
        node: String,
        finding: String,
        question: String,
    },
    NeedMeasurement {
        node: String,
        metric: String,
        units: String,
        acceptable: Vec<Provenance>,
    },
    NeedInLabTest {
        node: String,
        test: String,
        finding: String,
    },
    Concluded {
        node: String,
        diagnosis: String,
    },
}

impl StepOutcome {
    pub fn node(&self) -> &str {
        match self {
            StepOutcome::NeedAnswer { node, .. }
            | StepOutcome::NeedMeasurement { node, .. }
            | StepOutcome::NeedInLabTest { node, .. }
            | StepOutcome::Concluded { node, .. } => node,
        }
    }

    pub fn is_concluded(&self) -> bool {
        matches!(self, StepOutcome::Concluded { .. })
    }
}

impl fmt::Display for StepOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepOutcome::NeedAnswer {
                finding, question, ..
            } => write!(f, "ask [{finding}] {question}"),
            StepOutcome::NeedMeasurement {
                metric,
                units,
                acceptable,
                ..
            } => {
                let sources: Vec<&str> = acceptable.iter().map(|p| p.as_str()).collect();
                write!(f, "measure [{metric}] in {units} (accepted sources: {})", sources.join(", "))
            }
            StepOutcome::NeedInLabTest { test, finding, .. } => {
                write!(f, "order in-lab test [{finding}] {test}")
            }
            StepOutcome::Concluded { diagnosis, .. } => write!(f, "concluded: {diagnosis}"),
        }
    }
}

/// One decided node on the cursor path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub node: String,
    /// Answer label, `true`/`false` for conditions, `done` for lab tests.
    pub branch: String,
    /// Finding keys whose values decided the branch.
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeCursor {
    pub disease: String,
    pub tree_version: String,
    pub current: String,
    /// Root-to-current walk.
    pub path: Vec<String>,
    /// `trail[i]` records the decision taken at `path[i]`.
    pub trail: Vec<PathStep>,
    pub satisfied_evidence: usize,
    pub required_evidence: usize,
    /// No conclusion naming the tree's disease is reachable from `current`.
    pub contradicted: bool,
    pub pending: Option<StepOutcome>,
}

enum Decision {
    Go {
        child: String,
        branch: String,
        evidence: Vec<String>,
    },
    Stop(StepOutcome),
}

/// Three-valued predicate result plus the finding keys that were known.
fn eval_predicate(
    tree: &GuidelineTree,
    p: &Predicate,
    findings: &FindingSet,
    used: &mut Vec<String>,
) -> Result<Option<bool>, GuidelineError> {
    Ok(match p {
        Predicate::Compare {
            metric, op, value, ..
        } => match metric_value(tree, metric, findings)? {
            Some(v) => {
                let key = normalize_key(metric);
                if !used.contains(&key) {
                    used.push(key);
                }
                Some(op.apply(v, *value))
            }
            None => None,
        },
        Predicate::All { all } => {
            let mut unknown = false;
            let mut result = Some(true);
            for q in all {
                match eval_predicate(tree, q, findings, used)? {
                    Some(false) => result = Some(false),
                    None => unknown = true,
                    Some(true) => {}
                }
            }
            if result == Some(false) {
                Some(false)
            } else if unknown {
                None
            } else {
                Some(true)
            }
        }
        Predicate::Any { any } => {
            let mut unknown = false;
            let mut result = Some(false);
            for q in any {
                match eval_predicate(tree, q, findings, used)? {
                    Some(true) => result = Some(true),
                    None => unknown = true,
                    Some(false) => {}
                }
            }
            if result == Some(true) {
                Some(true)
            } else if unknown {
                None
            } else {
                Some(false)
            }
        }
        Predicate::Not { not } => eval_predicate(tree, not, findings, used)?.map(|b| !b),
    })
}

/// Value of a declared metric, ignoring sources the tree does not accept.
pub(crate) fn metric_value(
    tree: &GuidelineTree,
    metric: &str,
    findings: &FindingSet,
) -> Result<Option<f64>, GuidelineError> {
    let decl = tree.metric(metric).ok_or_else(|| GuidelineError::UnknownMetric {
        node: String::new(),
        metric: metric.to_string(),
    })?;
    let Some(f) = findings.get(metric) else {
        return Ok(None);
    };
    if !decl.provenance.contains(&f.provenance) {
        return Ok(None);
    }
    match &f.value {
        FindingValue::Number { value, units } if *units == decl.units => Ok(Some(*value)),
        FindingValue::Number { units, .. } => Err(GuidelineError::UnitMismatch {
            metric: decl.name.clone(),
            expected: decl.units.clone(),
            found: units.clone(),
        }),
        other => Err(GuidelineError::FindingType {
            key: decl.name.clone(),
            expected: "number".into(),
            found: other.to_string(),
        }),
    }
}

fn decide(tree: &GuidelineTree, node: &GuidelineNode, findings: &FindingSet) -> Result<Decision, GuidelineError> {
    match &node.kind {
        NodeKind::Question {
            finding,
            prompt,
            answers,
        } => {
            let answer = findings.get(finding).and_then(|f| f.value.as_answer());
            match answer.and_then(|a| answers.get(&a).map(|c| (a, c))) {
                Some((a, child)) => Ok(Decision::Go {
                    child: child.clone(),
                    branch: a,
                    evidence: vec![normalize_key(finding)],
                }),
                None => Ok(Decision::Stop(StepOutcome::NeedAnswer {
                    node: node.id.clone(),
                    finding: normalize_key(finding),
                    question: prompt.clone(),
                })),
            }
        }
        NodeKind::Condition {
            predicate,
            then,
            otherwise,
        } => {
            let mut used = Vec::new();
            match eval_predicate(tree, predicate, findings, &mut used)? {
                Some(b) => Ok(Decision::Go {
                    child: if b { then.clone() } else { otherwise.clone() },
                    branch: b.to_string(),
                    evidence: used,
                }),
                None => {
                    let mut missing = None;
                    for (metric, ..) in predicate.comparisons() {
                        if metric_value(tree, metric, findings)?.is_none() {
                            missing = Some(metric);
                            break;
                        }
                    }
                    let decl = tree
                        .metric(missing.expect("unknown predicate has an unknown leaf"))
                        .expect("validated metric");
                    Ok(Decision::Stop(StepOutcome::NeedMeasurement {
                        node: node.id.clone(),
                        metric: normalize_key(&decl.name),
                        units: decl.units.clone(),
                        acceptable: decl.provenance.clone(),
                    }))
                }
            }
        }
        NodeKind::InLabTest { test, next, .. } => {
            let key = node.lab_finding_key().expect("lab node");
            let done = findings
                .get(&key)
                .is_some_and(|f| f.provenance == Provenance::InLab);
            match next {
                Some(child) if done => Ok(Decision::Go {
                    child: child.clone(),
                    branch: "done".into(),
                    evidence: vec![key],
                }),
                _ => Ok(Decision::Stop(StepOutcome::NeedInLabTest {
                    node: node.id.clone(),
                    test: test.clone(),
                    finding: key,
                })),
            }
        }
        NodeKind::Conclusion { diagnosis, .. } => Ok(Decision::Stop(StepOutcome::Concluded {
            node: node.id.clone(),
            diagnosis: diagnosis.clone(),
        })),
    }
}

/// Fewest evidence nodes between `id` (inclusive) and a confirming conclusion.
fn distance_to_confirmation(tree: &GuidelineTree, id: &str, memo: &mut HashMap<String, Option<usize>>) -> Option<usize> {
    if let Some(d) = memo.get(id) {
        return *d;
    }
    let node = tree.node(id).expect("validated node");
    let d = match &node.kind {
        NodeKind::Conclusion { diagnosis, .. } => tree.confirms(diagnosis).then_some(0),
        _ => node
            .children()
            .iter()
            .filter_map(|c| distance_to_confirmation(tree, c, memo))
            .min()
            .map(|d| d + usize::from(node.is_evidence())),
    };
    memo.insert(id.to_string(), d);
    d
}

impl TreeCursor {
    pub fn new(tree: &GuidelineTree) -> Self {
        let mut c = Self {
            disease: tree.disease().to_string(),
            tree_version: tree.version().to_string(),
            current: tree.root_id().to_string(),
            path: vec![tree.root_id().to_string()],
            trail: Vec::new(),
            satisfied_evidence: 0,
            required_evidence: 0,
            contradicted: false,
            pending: None,
        };
        c.recount(tree);
        c
    }

    pub fn is_concluded(&self) -> bool {
        self.pending.as_ref().is_some_and(StepOutcome::is_concluded)
    }

    /// Diagnosis of the reached conclusion, if any.
    pub fn conclusion(&self) -> Option<&str> {
        match &self.pending {
            Some(StepOutcome::Concluded { diagnosis, .. }) => Some(diagnosis),
            _ => None,
        }
    }

    /// Finding keys cited along the decided path.
    pub fn evidence_keys(&self) -> Vec<&str> {
        let mut keys: Vec<&str> = Vec::new();
        for step in &self.trail {
            for k in &step.evidence {
                if !keys.contains(&k.as_str()) {
                    keys.push(k);
                }
            }
        }
        keys
    }

    fn recount(&mut self, tree: &GuidelineTree) {
        self.satisfied_evidence = self
            .trail
            .iter()
            .filter(|s| tree.node(&s.node).is_some_and(GuidelineNode::is_evidence))
            .count();
        let dist = distance_to_confirmation(tree, &self.current, &mut HashMap::new());
        self.contradicted = dist.is_none();
        self.required_evidence = self.satisfied_evidence + dist.unwrap_or(0);
    }

    /// Advances through every node decidable from `findings`. On error the
    /// cursor is left untouched.
    pub fn evaluate_step(&mut self, tree: &GuidelineTree, findings: &FindingSet) -> Result<StepOutcome, GuidelineError> {
        if self.disease != tree.disease() || self.tree_version != tree.version() {
            return Err(GuidelineError::CursorMismatch {
                cursor: format!("{}@{}", self.disease, self.tree_version),
                tree: format!("{}@{}", tree.disease(), tree.version()),
            });
        }
        let mut next = self.clone();
        let outcome = loop {
            let node = tree.node(&next.current).ok_or_else(|| GuidelineError::CursorMismatch {
                cursor: next.current.clone(),
                tree: tree.disease().to_string(),
            })?;
            match decide(tree, node, findings)? {
                Decision::Go {
                    child,
                    branch,
                    evidence,
                } => {
                    next.trail.push(PathStep {
                        node: node.id.clone(),
                        branch,
                        evidence,
                    });
                    next.path.push(child.clone());
                    next.current = child;
                }
                Decision::Stop(outcome) => break outcome,
            }
        };
        next.pending = Some(outcome.clone());
        next.recount(tree);
        *self = next;
        Ok(outcome)
    }

    /// One-line progress summary for prompts.
    pub fn status(&self) -> String {
        let state = if self.contradicted {
            "path no longer supports this disease".to_string()
        } else {
            format!(
                "{}/{} evidence nodes confirmed",
                self.satisfied_evidence, self.required_evidence
            )
        };
        match &self.pending {
            Some(p) => format!("{}: {state}; next: {p}", self.disease),
            None => format!("{}: {state}", self.disease),
        }
    }
}

/// Runs a fresh cursor from the root.
pub fn evaluate_from_root(tree: &GuidelineTree, findings: &FindingSet) -> Result<(StepOutcome, TreeCursor), GuidelineError> {
    let mut c = TreeCursor::new(tree);
    let o = c.evaluate_step(tree, findings)?;
    Ok((o, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guideline::findings::Finding;

    fn bronchitis() -> GuidelineTree {
        GuidelineTree::parse(
            r#"{"disease":"acute bronchitis","metrics":[
                {"name":"respiratory_rate","units":"breaths/min","provenance":["sensor","in-lab","patient-stated"]},
                {"name":"spo2","units":"%","provenance":["sensor","in-lab"]}],
              "root":"cough","nodes":[
              {"id":"cough","kind":"question","finding":"acute_cough","prompt":"New cough?","answers":{"yes":"vitals","no":"other"}},
              {"id":"vitals","kind":"condition","predicate":{"any":[
                  {"metric":"respiratory_rate","op":">","value":24,"units":"breaths/min"},
                  {"metric":"spo2","op":"<","value":95,"units":"%"}]},
               "then":"xray","else":"dx"},
              {"id":"xray","kind":"in_lab_test","test":"chest radiograph","next":"pneu"},
              {"id":"pneu","kind":"conclusion","diagnosis":"pneumonia"},
              {"id":"dx","kind":"conclusion","diagnosis":"acute bronchitis"},
              {"id":"other","kind":"conclusion","diagnosis":"not acute bronchitis"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn depth_one_concludes_immediately() {
        let t = GuidelineTree::parse(
            r#"{"disease":"x","root":"d","nodes":[{"id":"d","kind":"conclusion","diagnosis":"x"}]}"#,
        )
        .unwrap();
        let (o, c) = evaluate_from_root(&t, &FindingSet::new()).unwrap();
        assert!(o.is_concluded());
        assert_eq!(c.path, vec!["d"]);
    }

    #[test]
    fn missing_respiratory_rate_requests_measurement() {
        let t = bronchitis();
        let f = FindingSet::new().with("acute_cough", FindingValue::yes(), Provenance::PatientStated);
        let (o, c) = evaluate_from_root(&t, &f).unwrap();
        match o {
            StepOutcome::NeedMeasurement { metric, .. } => assert_eq!(metric, "respiratory_rate"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(c.path, vec!["cough", "vitals"]);
        assert_eq!((c.satisfied_evidence, c.required_evidence), (1, 2));
    }

    #[test]
    fn normal_vitals_conclude_bronchitis() {
        let t = bronchitis();
        let f = FindingSet::new()
            .with("acute_cough", FindingValue::yes(), Provenance::PatientStated)
            .with("respiratory_rate", FindingValue::number(18.0, "breaths/min"), Provenance::Sensor)
            .with("spo2", FindingValue::number(98.0, "%"), Provenance::Sensor);
        let (o, c) = evaluate_from_root(&t, &f).unwrap();
        assert_eq!(o, StepOutcome::Concluded { node: "dx".into(), diagnosis: "acute bronchitis".into() });
        assert_eq!((c.satisfied_evidence, c.required_evidence), (2, 2));
        assert_eq!(c.evidence_keys(), vec!["acute_cough", "respiratory_rate", "spo2"]);
    }

    #[test]
    fn single_high_rate_decides_any() {
        let t = bronchitis();
        let f = FindingSet::new()
            .with("acute_cough", FindingValue::yes(), Provenance::PatientStated)
            .with("respiratory_rate", FindingValue::number(30.0, "breaths/min"), Provenance::Sensor);
        let (o, c) = evaluate_from_root(&t, &f).unwrap();
        assert!(matches!(o, StepOutcome::NeedInLabTest { .. }));
        assert!(c.contradicted);
    }

    #[test]
    fn unaccepted_provenance_is_ignored() {
        let t = bronchitis();
        let f = FindingSet::new()
            .with("acute_cough", FindingValue::yes(), Provenance::PatientStated)
            .with("respiratory_rate", FindingValue::number(18.0, "breaths/min"), Provenance::Sensor)
            .with("spo2", FindingValue::number(90.0, "%"), Provenance::PatientStated);
        let (o, _) = evaluate_from_root(&t, &f).unwrap();
        assert!(matches!(o, StepOutcome::NeedMeasurement { ref metric, .. } if metric == "spo2"));
    }

    #[test]
    fn unit_mismatch_leaves_cursor_unchanged() {
        let t = bronchitis();
        let mut c = TreeCursor::new(&t);
        let before = c.clone();
        let f = FindingSet::new()
            .with("acute_cough", FindingValue::yes(), Provenance::PatientStated)
            .with("respiratory_rate", FindingValue::number(18.0, "per hour"), Provenance::Sensor);
        assert!(matches!(
            c.evaluate_step(&t, &f),
            Err(GuidelineError::UnitMismatch { .. })
        ));
        assert_eq!(c, before);
    }

    #[test]
    fn stepwise_equals_from_root() {
        let t = bronchitis();
        let mut c = TreeCursor::new(&t);
        let mut f = FindingSet::new();
        c.evaluate_step(&t, &f).unwrap();
        f.record("acute_cough", Finding::new(FindingValue::yes(), Provenance::PatientStated));
        c.evaluate_step(&t, &f).unwrap();
        f.record("respiratory_rate", Finding::new(FindingValue::number(20.0, "breaths/min"), Provenance::InLab));
        f.record("spo2", Finding::new(FindingValue::number(97.0, "%"), Provenance::InLab));
        let o = c.evaluate_step(&t, &f).unwrap();
        let (o2, c2) = evaluate_from_root(&t, &f).unwrap();
        assert_eq!(o, o2);
        assert_eq!(c, c2);
    }

    #[test]
    fn negative_answer_contradicts() {
        let t = bronchitis();
        let f = FindingSet::new().with("acute_cough", FindingValue::no(), Provenance::PatientStated);
        let (_, c) = evaluate_from_root(&t, &f).unwrap();
        assert!(c.contradicted);
        assert!(c.satisfied_evidence <= c.required_evidence);
    }
}
