//! Guideline tree DSL.
//!
//! A tree file is one JSON object:
//!
//! ```text
//! {
//!   "disease": "acute bronchitis",
//!   "version": "1",
//!   "source": "free-text citation",
//!   "metrics": [{"name": "respiratory_rate", "units": "breaths/min",
//!                "provenance": ["sensor", "in-lab"]}],
//!   "root": "<node id>",
//!   "nodes": [
//!     {"id": "q1", "kind": "question", "finding": "cough", "prompt": "...",
//!      "answers": {"yes": "c1", "no": "x1"}},
//!     {"id": "c1", "kind": "condition",
//!      "predicate": {"any": [{"metric": "respiratory_rate", "op": ">", "value": 24,
//!                              "units": "breaths/min"}, ...]},
//!      "then": "t1", "else": "d1"},
//!     {"id": "t1", "kind": "in_lab_test", "test": "chest x-ray", "next": "d2"},
//!     {"id": "d1", "kind": "conclusion", "diagnosis": "acute bronchitis", "weight": 1.0}
//!   ]
//! }
//! ```
//!
//! Predicates are a comparison (`metric`, `op` in `< <= > >= == !=`, `value`,
//! `units`) or a combinator `{"all": [...]}` / `{"any": [...]}` / `{"not": p}`.
//! An `in_lab_test` result is read from the finding named by its optional
//! `finding` field (defaults to the test name). `next` may be omitted, making
//! the test a leaf.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::findings::Provenance;
use super::GuidelineError;
use crate::text::normalize_key;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDecl {
    pub name: String,
    pub units: String,
    /// Sources whose values the tree accepts for this metric.
    #[serde(default = "all_provenances")]
    pub provenance: Vec<Provenance>,
}

fn all_provenances() -> Vec<Provenance> {
    Provenance::ALL.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "==")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
}

impl Comparator {
    pub fn apply(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Eq => lhs == rhs,
            Comparator::Ne => lhs != rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Comparator::Lt => "<",
            Comparator::Le => "<=",
            Comparator::Gt => ">",
            Comparator::Ge => ">=",
            Comparator::Eq => "==",
            Comparator::Ne => "!=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Predicate {
    Compare {
        metric: String,
        op: Comparator,
        value: f64,
        units: String,
    },
    All {
        all: Vec<Predicate>,
    },
    Any {
        any: Vec<Predicate>,
    },
    Not {
        not: Box<Predicate>,
    },
}

impl Predicate {
    /// Comparison leaves in left-to-right order.
    pub fn comparisons(&self) -> Vec<(&str, Comparator, f64, &str)> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<(&'a str, Comparator, f64, &'a str)>) {
        match self {
            Predicate::Compare {
                metric,
                op,
                value,
                units,
            } => out.push((metric, *op, *value, units)),
            Predicate::All { all: ps } | Predicate::Any { any: ps } => {
                ps.iter().for_each(|p| p.collect(out))
            }
            Predicate::Not { not } => not.collect(out),
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |f: &mut fmt::Formatter<'_>, ps: &[Predicate], sep: &str| {
            f.write_str("(")?;
            for (i, p) in ps.iter().enumerate() {
                if i > 0 {
                    f.write_str(sep)?;
                }
                write!(f, "{p}")?;
            }
            f.write_str(")")
        };
        match self {
            Predicate::Compare {
                metric,
                op,
                value,
                units,
            } => write!(f, "{metric} {} {value} {units}", op.symbol()),
            Predicate::All { all } => join(f, all, " AND "),
            Predicate::Any { any } => join(f, any, " OR "),
            Predicate::Not { not } => write!(f, "NOT {not}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Question {
        finding: String,
        prompt: String,
        answers: BTreeMap<String, String>,
    },
    Condition {
        predicate: Predicate,
        then: String,
        #[serde(rename = "else")]
        otherwise: String,
    },
    InLabTest {
        test: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        finding: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        next: Option<String>,
    },
    Conclusion {
        diagnosis: String,
        #[serde(default = "unit_weight")]
        weight: f64,
    },
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineNode {
    pub id: String,
    #[serde(flatten)]
    pub kind: NodeKind,
}

impl GuidelineNode {
    /// Child ids in branch order.
    pub fn children(&self) -> Vec<&str> {
        match &self.kind {
            NodeKind::Question { answers, .. } => answers.values().map(String::as_str).collect(),
            NodeKind::Condition {
                then, otherwise, ..
            } => vec![then, otherwise],
            NodeKind::InLabTest { next, .. } => next.iter().map(String::as_str).collect(),
            NodeKind::Conclusion { .. } => Vec::new(),
        }
    }

    /// Question and Condition nodes count toward evidence.
    pub fn is_evidence(&self) -> bool {
        matches!(self.kind, NodeKind::Question { .. } | NodeKind::Condition { .. })
    }

    /// Finding key an in-lab test result is recorded under.
    pub fn lab_finding_key(&self) -> Option<String> {
        match &self.kind {
            NodeKind::InLabTest { test, finding, .. } => {
                Some(normalize_key(finding.as_deref().unwrap_or(test)))
            }
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            NodeKind::Question { .. } => "question",
            NodeKind::Condition { .. } => "condition",
            NodeKind::InLabTest { .. } => "in_lab_test",
            NodeKind::Conclusion { .. } => "conclusion",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TreeDocument {
    disease: String,
    #[serde(default = "default_version")]
    version: String,
    #[serde(default)]
    source: String,
    #[serde(default)]
    metrics: Vec<MetricDecl>,
    root: String,
    nodes: Vec<GuidelineNode>,
}

fn default_version() -> String {
    "1".into()
}

/// Validated, immutable guideline tree. Nodes keep declaration order.
#[derive(Debug, Clone)]
pub struct GuidelineTree {
    doc: TreeDocument,
    index: HashMap<String, usize>,
}

impl PartialEq for GuidelineTree {
    fn eq(&self, other: &Self) -> bool {
        self.doc == other.doc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct NodeCounts {
    pub question: usize,
    pub condition: usize,
    pub in_lab_test: usize,
    pub conclusion: usize,
}

impl NodeCounts {
    pub fn total(&self) -> usize {
        self.question + self.condition + self.in_lab_test + self.conclusion
    }
}

impl GuidelineTree {
    pub fn parse(source: &str) -> Result<Self, GuidelineError> {
        let doc: TreeDocument = serde_json::from_str(source).map_err(|e| GuidelineError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::build(doc)
    }

    pub fn from_parts(
        disease: impl Into<String>,
        version: impl Into<String>,
        source: impl Into<String>,
        metrics: Vec<MetricDecl>,
        root: impl Into<String>,
        nodes: Vec<GuidelineNode>,
    ) -> Result<Self, GuidelineError> {
        Self::build(TreeDocument {
            disease: disease.into(),
            version: version.into(),
            source: source.into(),
            metrics,
            root: root.into(),
            nodes,
        })
    }

    fn build(doc: TreeDocument) -> Result<Self, GuidelineError> {
        if doc.disease.trim().is_empty() {
            return Err(GuidelineError::InvalidNode {
                node: doc.root.clone(),
                reason: "tree has an empty disease name".into(),
            });
        }
        let mut index = HashMap::new();
        for (i, node) in doc.nodes.iter().enumerate() {
            if node.id.trim().is_empty() {
                return Err(GuidelineError::InvalidNode {
                    node: format!("#{i}"),
                    reason: "empty node id".into(),
                });
            }
            if index.insert(node.id.clone(), i).is_some() {
                return Err(GuidelineError::DuplicateNode(node.id.clone()));
            }
        }
        let tree = Self { doc, index };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<(), GuidelineError> {
        if !self.index.contains_key(&self.doc.root) {
            return Err(GuidelineError::MissingRoot(self.doc.root.clone()));
        }
        let mut metric_names = HashSet::new();
        for m in &self.doc.metrics {
            if !metric_names.insert(normalize_key(&m.name)) {
                return Err(GuidelineError::InvalidNode {
                    node: m.name.clone(),
                    reason: "metric declared twice".into(),
                });
            }
        }
        for node in &self.doc.nodes {
            for child in node.children() {
                if !self.index.contains_key(child) {
                    return Err(GuidelineError::DanglingChild {
                        node: node.id.clone(),
                        child: child.to_string(),
                    });
                }
            }
            match &node.kind {
                NodeKind::Question { answers, finding, .. } => {
                    if answers.is_empty() {
                        return Err(invalid(node, "question has no answers"));
                    }
                    if finding.trim().is_empty() {
                        return Err(invalid(node, "question has no finding key"));
                    }
                    if answers.keys().any(|a| normalize_key(a) != *a) {
                        return Err(invalid(node, "answer labels must be lowercase and trimmed"));
                    }
                }
                NodeKind::Condition { predicate, .. } => {
                    self.validate_predicate(node, predicate)?;
                }
                NodeKind::InLabTest { test, .. } if test.trim().is_empty() => {
                    return Err(invalid(node, "in-lab test has no name"));
                }
                NodeKind::Conclusion { weight, .. } if !(weight.is_finite() && *weight >= 0.0) => {
                    return Err(invalid(node, "conclusion weight must be finite and >= 0"));
                }
                _ => {}
            }
        }
        self.check_acyclic()?;
        let reachable = self.reachable();
        if let Some(orphan) = self.doc.nodes.iter().find(|n| !reachable.contains(n.id.as_str())) {
            return Err(GuidelineError::Unreachable(orphan.id.clone()));
        }
        Ok(())
    }

    fn validate_predicate(&self, node: &GuidelineNode, p: &Predicate) -> Result<(), GuidelineError> {
        match p {
            Predicate::Compare {
                metric,
                units,
                value,
                ..
            } => {
                let decl = self.metric(metric).ok_or_else(|| GuidelineError::UnknownMetric {
                    node: node.id.clone(),
                    metric: metric.clone(),
                })?;
                if decl.units != *units {
                    return Err(GuidelineError::UnitMismatch {
                        metric: metric.clone(),
                        expected: decl.units.clone(),
                        found: units.clone(),
                    });
                }
                if !value.is_finite() {
                    return Err(invalid(node, "non-finite threshold"));
                }
                Ok(())
            }
            Predicate::All { all: ps } | Predicate::Any { any: ps } => {
                if ps.is_empty() {
                    return Err(invalid(node, "empty predicate combinator"));
                }
                ps.iter().try_for_each(|q| self.validate_predicate(node, q))
            }
            Predicate::Not { not } => self.validate_predicate(node, not),
        }
    }

    fn check_acyclic(&self) -> Result<(), GuidelineError> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; self.doc.nodes.len()];
        let mut path: Vec<usize> = Vec::new();
        for start in 0..self.doc.nodes.len() {
            if state[start] != 0 {
                continue;
            }
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            path.push(start);
            while let Some(&mut (at, ref mut next_child)) = stack.last_mut() {
                let children = self.doc.nodes[at].children();
                if *next_child < children.len() {
                    let child = self.index[children[*next_child]];
                    *next_child += 1;
                    match state[child] {
                        0 => {
                            state[child] = 1;
                            stack.push((child, 0));
                            path.push(child);
                        }
                        1 => {
                            let from = path.iter().position(|&n| n == child).unwrap_or(0);
                            let mut cycle: Vec<String> =
                                path[from..].iter().map(|&n| self.doc.nodes[n].id.clone()).collect();
                            cycle.push(self.doc.nodes[child].id.clone());
                            return Err(GuidelineError::Cycle { path: cycle });
                        }
                        _ => {}
                    }
                } else {
                    state[at] = 2;
                    stack.pop();
                    path.pop();
                }
            }
        }
        Ok(())
    }

    fn reachable(&self) -> HashSet<&str> {
        let mut seen = HashSet::new();
        let mut stack = vec![self.doc.root.as_str()];
        while let Some(id) = stack.pop() {
            if seen.insert(id) {
                stack.extend(self.doc.nodes[self.index[id]].children());
            }
        }
        seen
    }

    /// Pretty-printed DSL source; parses back to an equal tree.
    pub fn to_source(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("tree document serializes")
    }

    pub fn disease(&self) -> &str {
        &self.doc.disease
    }

    pub fn version(&self) -> &str {
        &self.doc.version
    }

    pub fn source(&self) -> &str {
        &self.doc.source
    }

    pub fn metrics(&self) -> &[MetricDecl] {
        &self.doc.metrics
    }

    pub fn metric(&self, name: &str) -> Option<&MetricDecl> {
        let key = normalize_key(name);
        self.doc.metrics.iter().find(|m| normalize_key(&m.name) == key)
    }

    pub fn root_id(&self) -> &str {
        &self.doc.root
    }

    pub fn root(&self) -> &GuidelineNode {
        self.node(&self.doc.root).expect("validated root")
    }

    pub fn node(&self, id: &str) -> Option<&GuidelineNode> {
        self.index.get(id).map(|&i| &self.doc.nodes[i])
    }

    pub fn nodes(&self) -> &[GuidelineNode] {
        &self.doc.nodes
    }

    /// Longest root-to-leaf path, counted in nodes.
    pub fn depth(&self) -> usize {
        fn go(t: &GuidelineTree, id: &str, memo: &mut HashMap<String, usize>) -> usize {
            if let Some(&d) = memo.get(id) {
                return d;
            }
            let node = t.node(id).expect("validated child");
            let d = 1 + node.children().iter().map(|c| go(t, c, memo)).max().unwrap_or(0);
            memo.insert(id.to_string(), d);
            d
        }
        go(self, &self.doc.root, &mut HashMap::new())
    }

    pub fn counts(&self) -> NodeCounts {
        let mut c = NodeCounts::default();
        for n in &self.doc.nodes {
            match n.kind {
                NodeKind::Question { .. } => c.question += 1,
                NodeKind::Condition { .. } => c.condition += 1,
                NodeKind::InLabTest { .. } => c.in_lab_test += 1,
                NodeKind::Conclusion { .. } => c.conclusion += 1,
            }
        }
        c
    }

    /// Whether a conclusion's diagnosis names this tree's disease.
    pub fn confirms(&self, diagnosis: &str) -> bool {
        normalize_key(diagnosis) == normalize_key(&self.doc.disease)
    }

    /// Indented if-else rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = format!("Guideline for {} (version {})\n", self.doc.disease, self.doc.version);
        self.render_node(&self.doc.root, 1, &mut out);
        out
    }

    fn render_node(&self, id: &str, depth: usize, out: &mut String) {
        let node = self.node(id).expect("validated child");
        let pad = "  ".repeat(depth);
        match &node.kind {
            NodeKind::Question {
                finding,
                prompt,
                answers,
            } => {
                out.push_str(&format!("{pad}[{id}] ASK {finding}: {prompt}\n"));
                for (answer, child) in answers {
                    out.push_str(&format!("{pad}  if {answer}:\n"));
                    self.render_node(child, depth + 2, out);
                }
            }
            NodeKind::Condition {
                predicate,
                then,
                otherwise,
            } => {
                out.push_str(&format!("{pad}[{id}] IF {predicate}:\n"));
                self.render_node(then, depth + 1, out);
                out.push_str(&format!("{pad}ELSE:\n"));
                self.render_node(otherwise, depth + 1, out);
            }
            NodeKind::InLabTest { test, next, .. } => {
                out.push_str(&format!("{pad}[{id}] IN-LAB TEST: {test}\n"));
                if let Some(next) = next {
                    self.render_node(next, depth, out);
                }
            }
            NodeKind::Conclusion { diagnosis, .. } => {
                out.push_str(&format!("{pad}[{id}] CONCLUDE: {diagnosis}\n"));
            }
        }
    }
}

fn invalid(node: &GuidelineNode, reason: &str) -> GuidelineError {
    GuidelineError::InvalidNode {
        node: node.id.clone(),
        reason: reason.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SINGLE: &str = r#"{"disease":"x","root":"d","nodes":[{"id":"d","kind":"conclusion","diagnosis":"x"}]}"#;

    #[test]
    fn single_conclusion_has_depth_one() {
        let t = GuidelineTree::parse(SINGLE).unwrap();
        assert_eq!(t.depth(), 1);
        assert_eq!(t.counts().conclusion, 1);
    }

    #[test]
    fn syntax_error_has_position() {
        let err = GuidelineTree::parse("{\n  \"disease\": \"x\",\n  oops\n}").unwrap_err();
        match err {
            GuidelineError::Syntax { line, column, .. } => {
                assert_eq!(line, 3);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dangling_child_named() {
        let src = r#"{"disease":"x","root":"q","nodes":[
            {"id":"q","kind":"question","finding":"f","prompt":"?","answers":{"yes":"d","no":"ghost"}},
            {"id":"d","kind":"conclusion","diagnosis":"x"}]}"#;
        match GuidelineTree::parse(src).unwrap_err() {
            GuidelineError::DanglingChild { node, child } => {
                assert_eq!(node, "q");
                assert_eq!(child, "ghost");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cycle_reported() {
        let src = r#"{"disease":"x","root":"a","nodes":[
            {"id":"a","kind":"question","finding":"f","prompt":"?","answers":{"yes":"b","no":"d"}},
            {"id":"b","kind":"in_lab_test","test":"t","next":"a"},
            {"id":"d","kind":"conclusion","diagnosis":"x"}]}"#;
        match GuidelineTree::parse(src).unwrap_err() {
            GuidelineError::Cycle { path } => assert_eq!(path, vec!["a", "b", "a"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_metric_reported() {
        let src = r#"{"disease":"x","root":"c","nodes":[
            {"id":"c","kind":"condition","predicate":{"metric":"hr","op":">","value":1,"units":"bpm"},
             "then":"d","else":"d"},
            {"id":"d","kind":"conclusion","diagnosis":"x"}]}"#;
        assert!(matches!(
            GuidelineTree::parse(src).unwrap_err(),
            GuidelineError::UnknownMetric { ref metric, .. } if metric == "hr"
        ));
    }

    #[test]
    fn unreachable_node_rejected() {
        let src = r#"{"disease":"x","root":"d","nodes":[
            {"id":"d","kind":"conclusion","diagnosis":"x"},
            {"id":"e","kind":"conclusion","diagnosis":"y"}]}"#;
        assert!(matches!(GuidelineTree::parse(src).unwrap_err(), GuidelineError::Unreachable(_)));
    }

    #[test]
    fn round_trip_identity() {
        let src = r#"{"disease":"x","version":"2","source":"s","metrics":[{"name":"hr","units":"bpm","provenance":["sensor"]}],
            "root":"c","nodes":[
            {"id":"c","kind":"condition","predicate":{"not":{"any":[{"metric":"hr","op":">=","value":100,"units":"bpm"}]}},
             "then":"t","else":"d"},
            {"id":"t","kind":"in_lab_test","test":"ecg","next":"d"},
            {"id":"d","kind":"conclusion","diagnosis":"x","weight":0.5}]}"#;
        let a = GuidelineTree::parse(src).unwrap();
        let b = GuidelineTree::parse(&a.to_source()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_source(), b.to_source());
    }

    #[test]
    fn render_mentions_every_node() {
        let t = GuidelineTree::parse(SINGLE).unwrap();
        assert!(t.render().contains("[d] CONCLUDE: x"));
    }
}
