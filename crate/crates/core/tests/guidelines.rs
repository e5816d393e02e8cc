mod common;

use std::collections::{HashMap, VecDeque};

use dxloop_core::consultation::guideline_probability;
use dxloop_core::guideline::{
    DirectTreeIndex, FindingSet, FindingValue, GuidelineLibrary, GuidelineTree, NodeKind, Predicate, Provenance,
    SeedScoring, TreeCursor,
};
use dxloop_core::text::normalize_key;

fn library() -> GuidelineLibrary {
    GuidelineLibrary::load_dir(common::fixtures().join("guidelines")).unwrap()
}

#[test]
fn fixture_corpus_round_trips_through_the_source_format() {
    let lib = library();
    assert!(lib.len() >= 10);
    for tree in lib.iter() {
        let again = GuidelineTree::parse(&tree.to_source()).unwrap();
        assert_eq!(&again, tree.as_ref(), "{}", tree.disease());
        assert_eq!(again.to_source(), tree.to_source());
    }
}

#[test]
fn bronchitis_transcription_has_the_expected_shape() {
    let lib = library();
    let t = lib.get("acute bronchitis").unwrap();
    assert_eq!(t.root_id(), "q_cough");
    let vitals = t.node("c_vitals").unwrap();
    let NodeKind::Condition { predicate, then, otherwise } = &vitals.kind else {
        panic!("c_vitals is a condition");
    };
    assert!(matches!(predicate, Predicate::Any { any } if any.len() == 2));
    assert_eq!((then.as_str(), otherwise.as_str()), ("t_xray", "d_bronchitis"));
    assert!(matches!(t.node("t_xray").unwrap().kind, NodeKind::InLabTest { .. }));
}

#[test]
fn dangling_fixture_is_rejected_with_the_missing_node() {
    let text = std::fs::read_to_string(common::fixtures().join("dangling.tree")).unwrap();
    let err = GuidelineTree::parse(&text).unwrap_err().to_string();
    assert!(err.contains("d_missing"), "{err}");
}

/// Fewest evidence nodes from `from` to a conclusion confirming the tree's
/// disease, by breadth-first search over the node graph.
fn evidence_to_confirmation(tree: &GuidelineTree, from: &str) -> Option<usize> {
    let mut best: HashMap<String, usize> = HashMap::new();
    let mut queue = VecDeque::from([(from.to_string(), 0usize)]);
    let mut found: Option<usize> = None;
    while let Some((id, cost)) = queue.pop_front() {
        if best.get(&id).is_some_and(|&c| c <= cost) {
            continue;
        }
        best.insert(id.clone(), cost);
        let node = tree.node(&id).unwrap();
        let cost = cost + usize::from(node.is_evidence());
        if let NodeKind::Conclusion { diagnosis, .. } = &node.kind {
            if tree.confirms(diagnosis) {
                found = Some(found.map_or(cost, |f| f.min(cost)));
            }
        }
        for c in node.children() {
            queue.push_back((c.to_string(), cost));
        }
    }
    found
}

fn cursor_after(tree: &GuidelineTree, findings: &FindingSet) -> TreeCursor {
    let mut c = TreeCursor::new(tree);
    c.evaluate_step(tree, findings).unwrap();
    c
}

#[test]
fn guideline_probability_on_fixture_trees() {
    let lib = library();
    let eps = 0.01;

    let osa = lib.get("obstructive sleep apnea").unwrap();
    let fresh = cursor_after(osa, &FindingSet::new());
    assert_eq!(evidence_to_confirmation(osa, osa.root_id()), Some(4));
    assert_eq!(guideline_probability(Some(&fresh), Some(osa), 0.4, eps), eps);

    let two = FindingSet::new()
        .with("loud_snoring", FindingValue::yes(), Provenance::PatientStated)
        .with("daytime_sleepiness", FindingValue::yes(), Provenance::PatientStated);
    let c = cursor_after(osa, &two);
    let remaining = evidence_to_confirmation(osa, &c.current).unwrap();
    assert_eq!((c.satisfied_evidence, c.satisfied_evidence + remaining), (2, 4));
    assert_eq!(c.required_evidence, 4);
    assert!((guideline_probability(Some(&c), Some(osa), 0.4, eps) - 0.5).abs() < 1e-12);

    let gastritis = lib.get("gastritis").unwrap();
    let done = FindingSet::new()
        .with("epigastric_pain", FindingValue::yes(), Provenance::PatientStated)
        .with("pain_after_meals", FindingValue::yes(), Provenance::PatientStated);
    let c = cursor_after(gastritis, &done);
    assert_eq!(c.conclusion(), Some("gastritis"));
    assert_eq!(guideline_probability(Some(&c), Some(gastritis), 0.4, eps), 1.0);

    let ruled_out = FindingSet::new().with("epigastric_pain", FindingValue::no(), Provenance::PatientStated);
    let c = cursor_after(gastritis, &ruled_out);
    assert!(c.contradicted);
    assert_eq!(guideline_probability(Some(&c), Some(gastritis), 0.4, eps), eps);
}

#[test]
fn required_evidence_matches_the_search_oracle_on_every_fresh_tree() {
    for tree in library().iter() {
        let c = cursor_after(tree, &FindingSet::new());
        let oracle = evidence_to_confirmation(tree, &c.current).map(|r| c.satisfied_evidence + r);
        assert_eq!(Some(c.required_evidence), oracle, "{}", tree.disease());
    }
}

/// Top-1 accuracy of symptom-table mapping and of direct tree-text retrieval
/// on the paraphrase fixture.
pub fn mapping_and_direct_accuracy() -> (f64, f64) {
    let engine = common::demo_engine();
    let kb = engine.knowledge().read().unwrap();
    let e = engine.gateway().embedder();
    let direct = DirectTreeIndex::build(&kb.library, kb.chunk_policy, e).unwrap();
    let text = std::fs::read_to_string(common::fixtures().join("mapping_queries.jsonl")).unwrap();
    let (mut mapped, mut direct_hits, mut n) = (0usize, 0usize, 0usize);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let phrase = v["phrase"].as_str().unwrap();
        let truth: Vec<String> = v["diseases"]
            .as_array()
            .unwrap()
            .iter()
            .map(|d| normalize_key(d.as_str().unwrap()))
            .collect();
        let seeds = kb.symptoms.map_symptoms(e, phrase, 1, SeedScoring::Max).unwrap();
        mapped += usize::from(seeds.first().is_some_and(|s| truth.contains(&normalize_key(&s.disease))));
        let top = direct.top_disease(e, phrase).unwrap();
        direct_hits += usize::from(top.is_some_and(|d| truth.contains(&normalize_key(&d))));
        n += 1;
    }
    assert_eq!(n, 50);
    (mapped as f64 / n as f64, direct_hits as f64 / n as f64)
}

#[test]
fn symptom_mapping_beats_direct_tree_retrieval() {
    let (mapped, direct) = mapping_and_direct_accuracy();
    assert!(mapped - direct >= 0.15, "mapping {mapped} direct {direct}");
}
