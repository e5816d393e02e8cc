mod common;

use dxloop_core::evaluation::{retrieval_rate, score_dialogue, scores_csv, simulate_batch, ScoreRow};

#[test]
fn batch_simulation_scores_every_dialogue_with_the_rubric_judge() {
    let engine = common::demo_engine();
    let patients = common::patients();
    let sims = simulate_batch(&engine, &patients, 2 * patients.len());
    assert_eq!(sims.len(), 10);
    let mut rows = Vec::new();
    for (i, sim) in sims.into_iter().enumerate() {
        let sim = sim.unwrap();
        let p = &patients[i % patients.len()];
        let expected_id = if i < patients.len() { p.profile_id.clone() } else { format!("{}-1", p.profile_id) };
        assert_eq!(sim.transcript.session_id, expected_id);
        let kb = engine.knowledge().read().unwrap();
        let tree = kb.library.get(&p.ground_truth).map(|t| t.as_ref());
        let score = score_dialogue(engine.gateway(), &sim.transcript, &p.ground_truth, tree).unwrap();
        let mean = (score.compliance.score + score.sensor_utilization.score + score.accuracy.score) / 3.0;
        assert!((score.overall - mean).abs() < 1e-12);
        assert_eq!(score.accuracy.score, 10.0, "{}", p.profile_id);
        rows.push(ScoreRow::new(&sim.transcript, &p.ground_truth, &score).unwrap());
    }
    let by_id = |id: &str| rows.iter().find(|r| r.session_id == id).unwrap();
    // hand counts from the fixture dialogues
    assert_eq!(by_id("p_gastritis").retrieval_rate, 0.0);
    assert_eq!(by_id("p_resp").retrieval_rate, 2.0 / 5.0);
    assert_eq!(by_id("p_deviant").retrieval_rate, 1.0 / 5.0);
    assert_eq!(by_id("p_deviant").sensor_utilization, 7.0);
    assert_eq!(by_id("p_resp").sensor_utilization, 10.0);
    assert_eq!(by_id("p_migraine").compliance, 10.0);
    let csv = scores_csv(&rows).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn retrieval_rate_of_simulated_transcripts_matches_the_log() {
    let engine = common::demo_engine();
    for p in common::patients() {
        let sim = dxloop_core::evaluation::simulate_patient(&engine, &p, &p.profile_id).unwrap();
        let performed = sim.transcript.turns.iter().filter(|t| t.retrieval.performed).count();
        let rate = retrieval_rate(&sim.transcript).unwrap();
        assert_eq!(rate, performed as f64 / sim.transcript.turns.len() as f64);
    }
}
