mod common;

use dxloop_core::consultation::{ConsultationConfig, SensorMode};
use dxloop_core::evaluation::retrieval_rate;

struct Run {
    performed: Vec<bool>,
    rate: f64,
    reads: u64,
}

fn run(mode: SensorMode, with_filter: bool) -> Run {
    let script = common::retrieval_script();
    let replies: Vec<String> = script.iter().map(|t| t.doctor.clone()).collect();
    let cfg = ConsultationConfig {
        sensor_mode: mode,
        max_turns: 40,
        ..Default::default()
    };
    let engine = common::scripted_engine(&replies, cfg);
    if with_filter {
        common::install_filter(&engine);
    }
    common::ingest_trace(&engine, "p_resp.csv");
    let (mut s, _) = engine
        .start("r", "p_resp", "coughing up yellow phlegm for a week after a cold", Default::default())
        .unwrap();
    for t in &script[..script.len() - 1] {
        engine.step(&mut s, &t.patient).unwrap();
    }
    engine.finalize(&mut s);
    let export = s.export();
    assert_eq!(export.turns.len(), 20);
    let reads = engine.knowledge().read().unwrap().sensors.read_count("p_resp");
    Run {
        performed: export.turns.iter().map(|t| t.retrieval.performed).collect(),
        rate: retrieval_rate(&export).unwrap(),
        reads,
    }
}

#[test]
fn script_has_eight_sensor_relevant_turns_out_of_twenty() {
    let s = common::retrieval_script();
    assert_eq!(s.len(), 20);
    assert_eq!(s.iter().filter(|t| t.sensor_relevant).count(), 8);
}

#[test]
fn filtered_retrieval_covers_relevant_turns_at_less_than_half_the_rate() {
    let relevant: Vec<bool> = common::retrieval_script().iter().map(|t| t.sensor_relevant).collect();
    let filtered = run(SensorMode::Filtered, true);
    let always = run(SensorMode::Always, true);
    for (i, (&r, &p)) in relevant.iter().zip(&filtered.performed).enumerate() {
        assert!(!r || p, "relevant turn {} skipped", i + 1);
    }
    let total = filtered.performed.iter().filter(|&&p| p).count();
    assert!(total <= 10, "{total} retrievals");
    assert_eq!(always.performed.iter().filter(|&&p| p).count(), 20);
    assert!(always.rate / filtered.rate >= 2.0, "{} vs {}", always.rate, filtered.rate);
    assert_eq!(always.reads, 20);
}

#[test]
fn filtered_mode_without_a_model_follows_explicit_sensor_actions() {
    let relevant: Vec<bool> = common::retrieval_script().iter().map(|t| t.sensor_relevant).collect();
    let r = run(SensorMode::Filtered, false);
    assert_eq!(r.performed, relevant);
}

#[test]
fn disabled_mode_never_reads_the_store() {
    let r = run(SensorMode::Disabled, true);
    assert!(r.performed.iter().all(|p| !p));
    assert_eq!(r.reads, 0);
    assert_eq!(r.rate, 0.0);
}
