#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};

use dxloop_core::config::AppConfig;
use dxloop_core::consultation::{ActionKind, Engine, TurnResult};
use dxloop_core::evaluation::{GuidelineDoctor, PatientScript, SyntheticPatient};
use dxloop_core::gateway::{ChatBackend, ChatRequest, ChatRole, Completion, GatewayError};
use dxloop_service::{router, AppState, ServiceOptions};
use serde_json::{json, Value};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn demo_config() -> AppConfig {
    AppConfig::load(fixtures().join("demo.toml")).expect("demo config")
}

pub fn demo_engine() -> Engine {
    demo_config().engine().expect("demo engine")
}

/// Demo engine with `doctor` answering doctor turns.
pub fn engine_with_doctor(doctor: Arc<dyn ChatBackend>) -> Engine {
    let cfg = demo_config();
    let gateway = cfg.gateway().expect("gateway").with_role_backend(ChatRole::Doctor, doctor);
    let kb = cfg.knowledge_base(&gateway).expect("kb");
    Engine::new(Arc::new(RwLock::new(kb)), gateway, cfg.consultation.clone()).expect("engine")
}

pub fn patients() -> Vec<SyntheticPatient> {
    SyntheticPatient::load_jsonl(&fixtures().join("patients.jsonl")).expect("patients")
}

pub fn patient(id: &str) -> SyntheticPatient {
    patients().into_iter().find(|p| p.profile_id == id).expect("known patient")
}

pub fn options(dir: Option<&Path>) -> ServiceOptions {
    ServiceOptions {
        data_dir: dir.map(Path::to_path_buf),
        ..Default::default()
    }
}

pub struct Server {
    pub base: String,
    pub client: reqwest::Client,
    pub engine: Engine,
    task: tokio::task::JoinHandle<()>,
}

impl Drop for Server {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub async fn spawn(engine: Engine, options: ServiceOptions) -> Server {
    let state = AppState::new(engine.clone(), options).expect("state");
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.expect("bind");
    let addr = listener.local_addr().expect("addr");
    let task = tokio::spawn(async move {
        axum::serve(listener, router(state)).await.expect("serve");
    });
    Server {
        base: format!("http://{addr}"),
        client: reqwest::Client::new(),
        engine,
        task,
    }
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(self.url(path)).json(&body).send().await.expect("send");
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn put(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.put(self.url(path)).json(&body).send().await.expect("send");
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(self.url(path)).send().await.expect("send");
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    pub async fn get_text(&self, path: &str) -> (u16, String) {
        let r = self.client.get(self.url(path)).send().await.expect("send");
        let status = r.status().as_u16();
        (status, r.text().await.expect("body"))
    }

    pub async fn upload_trace(&self, p: &SyntheticPatient) {
        let Some(trace) = &p.sensor_trace else {
            return;
        };
        let csv = std::fs::read_to_string(trace).expect("trace");
        let (status, body) = self
            .post(&format!("/v1/patients/{}/sensors", p.patient_id()), json!({ "csv": csv }))
            .await;
        assert_eq!(status, 200, "{body}");
    }

    pub async fn create(&self, p: &SyntheticPatient, session_id: &str) -> (u16, Value) {
        self.post(
            "/v1/sessions",
            json!({
                "session_id": session_id,
                "patient_id": p.patient_id(),
                "demographics": p.demographics,
                "first_symptoms": p.first_symptoms,
            }),
        )
        .await
    }

    /// The patient's reply to `turn`, or `None` once the script has nothing to say.
    pub fn reply(&self, script: &mut PatientScript<'_>, turn: &TurnResult) -> Option<String> {
        let kb = self.engine.knowledge().read().unwrap();
        script.respond(&turn.action, &kb.library)
    }

    /// Creates a session and answers from the script until the doctor
    /// concludes or `max_turns` doctor turns exist. Returns the last turn.
    pub async fn drive(&self, p: &SyntheticPatient, session_id: &str, max_turns: usize) -> TurnResult {
        let (status, body) = self.create(p, session_id).await;
        assert_eq!(status, 201, "{body}");
        let mut turn: TurnResult = serde_json::from_value(body["turn"].clone()).expect("turn");
        let mut script = PatientScript::new(p);
        while turn.turn < max_turns && !matches!(turn.action, ActionKind::SummarizeDiagnosis) {
            let Some(text) = self.reply(&mut script, &turn) else {
                break;
            };
            let (status, body) = self
                .post(&format!("/v1/sessions/{session_id}/messages"), json!({ "text": text }))
                .await;
            assert_eq!(status, 200, "{body}");
            turn = serde_json::from_value(body).expect("turn");
        }
        turn
    }
}

/// Guideline doctor that parks the `block_at`-th call (1-based) until
/// released.
pub struct GatedDoctor {
    calls: AtomicUsize,
    block_at: usize,
    gate: Mutex<(bool, bool)>,
    signal: Condvar,
}

impl GatedDoctor {
    pub fn new(block_at: usize) -> Arc<Self> {
        Arc::new(Self {
            calls: AtomicUsize::new(0),
            block_at,
            gate: Mutex::new((false, false)),
            signal: Condvar::new(),
        })
    }

    /// Blocks until the gated call has started.
    pub fn wait_entered(&self) {
        let g = self.gate.lock().unwrap();
        let _g = self.signal.wait_while(g, |(entered, _)| !*entered).unwrap();
    }

    pub fn release(&self) {
        self.gate.lock().unwrap().1 = true;
        self.signal.notify_all();
    }
}

impl ChatBackend for GatedDoctor {
    fn complete(&self, request: &ChatRequest) -> dxloop_core::gateway::Result<Completion> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst) + 1;
        if n == self.block_at {
            let mut g = self.gate.lock().unwrap();
            g.0 = true;
            self.signal.notify_all();
            let _g = self.signal.wait_while(g, |(_, released)| !*released).unwrap();
        }
        GuidelineDoctor.complete(request)
    }
}

/// Doctor whose provider always answers 503.
pub struct DownDoctor;

impl ChatBackend for DownDoctor {
    fn complete(&self, _: &ChatRequest) -> dxloop_core::gateway::Result<Completion> {
        Err(GatewayError::Http {
            status: 503,
            attempts: 3,
            body: "overloaded".into(),
        })
    }
}

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
            let v: Value = serde_json::from_str(l).expect("json line");
            ScriptTurn {
                doctor: v["doctor"].as_str().expect("doctor").into(),
                patient: v["patient"].as_str().expect("patient").into(),
                sensor_relevant: v["sensor_relevant"].as_bool().expect("flag"),
            }
        })
        .collect()
}

/// Demo engine whose doctor replies with `replies` in order.
pub fn scripted_engine(replies: &[String], consultation: dxloop_core::consultation::ConsultationConfig) -> Engine {
    use dxloop_core::gateway::mock::{RequestMatcher, ScriptedBackend, ScriptedTranscript};
    let script = replies
        .iter()
        .fold(ScriptedTranscript::new(true), |t, r| t.reply(RequestMatcher::any(), r.clone()));
    let cfg = demo_config();
    let gateway = cfg
        .gateway()
        .expect("gateway")
        .with_role_backend(ChatRole::Doctor, Arc::new(ScriptedBackend::new(script)));
    let kb = cfg.knowledge_base(&gateway).expect("kb");
    Engine::new(Arc::new(RwLock::new(kb)), gateway, consultation).expect("engine")
}

/// Filter trained on 200 synthetic queries, seed 0.
pub fn install_filter(engine: &Engine) {
    use dxloop_core::sensor::{synthetic_queries, train_filter, TrainingOptions};
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

/// Demo engine recording every doctor request before the guideline doctor answers it.
pub fn recording_engine() -> (Engine, Arc<Mutex<Vec<ChatRequest>>>) {
    use dxloop_core::gateway::mock::FnBackend;
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let doctor = FnBackend::new(move |req: &ChatRequest| {
        log.lock().unwrap().push(req.clone());
        Ok(GuidelineDoctor.complete(req)?.text)
    });
    (engine_with_doctor(Arc::new(doctor)), seen)
}
