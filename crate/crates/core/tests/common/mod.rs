#![allow(dead_code)]

use std::path::PathBuf;

use dxloop_core::config::AppConfig;
use dxloop_core::consultation::Engine;
use dxloop_core::evaluation::SyntheticPatient;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn demo_config() -> AppConfig {
    AppConfig::load(fixtures().join("demo.toml")).expect("demo config")
}

pub fn demo_engine() -> Engine {
    demo_config().engine().expect("demo engine")
}

pub fn patients() -> Vec<SyntheticPatient> {
    SyntheticPatient::load_jsonl(&fixtures().join("patients.jsonl")).expect("patients")
}

pub fn patient(id: &str) -> SyntheticPatient {
    patients().into_iter().find(|p| p.profile_id == id).expect("known patient")
}

use std::sync::{Arc, RwLock};

use dxloop_core::consultation::ConsultationConfig;
use dxloop_core::gateway::mock::{RequestMatcher, ScriptedBackend, ScriptedTranscript};
use dxloop_core::gateway::ChatRole;
use dxloop_core::sensor::{synthetic_queries, train_filter, TrainingOptions};

pub struct ScriptTurn {
    pub doctor: String,
    pub patient: String,
    pub sensor_relevant: bool,
}

pub fn retrieval_script() -> Vec<ScriptTurn> {
    let text = std::fs::read_to_string(fixtures().join("retrieval_script.jsonl")).expect("script");
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).expect("json line");
            ScriptTurn {
                doctor: v["doctor"].as_str().expect("doctor").into(),
                patient: v["patient"].as_str().expect("patient").into(),
                sensor_relevant: v["sensor_relevant"].as_bool().expect("flag"),
            }
        })
        .collect()
}

/// Demo engine whose doctor replies with `replies` in order.
pub fn scripted_engine(replies: &[String], consultation: ConsultationConfig) -> Engine {
    let cfg = demo_config();
    let script = replies
        .iter()
        .fold(ScriptedTranscript::new(true), |t, r| t.reply(RequestMatcher::any(), r.clone()));
    let gateway = cfg
        .gateway()
        .expect("gateway")
        .with_role_backend(ChatRole::Doctor, Arc::new(ScriptedBackend::new(script)));
    let kb = cfg.knowledge_base(&gateway).expect("kb");
    Engine::new(Arc::new(RwLock::new(kb)), gateway, consultation).expect("engine")
}

/// Filter trained on 200 synthetic queries, seed 0.
pub fn install_filter(engine: &Engine) {
    let model = train_filter(
        engine.gateway().embedder(),
        &synthetic_queries(200, 0),
        TrainingOptions::default(),
        None,
    )
    .expect("filter");
    engine.knowledge().write().unwrap().filter = Some(model);
}

pub fn ingest_trace(engine: &Engine, file: &str) {
    let path = fixtures().join("sensors").join(file);
    let mut kb = engine.knowledge().write().unwrap();
    kb.ingest_sensor_file(&path, engine.gateway().embedder()).expect("trace");
}
