use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use dxloop_core::config::AppConfig;
use dxloop_core::evaluation::{score_dialogue, scores_csv, simulate_patient, ScoreRow, SyntheticPatient};
use dxloop_core::sensor::{evaluate_filter, synthetic_queries, train_filter, FilterModel, LabeledQuery, TrainingOptions};
use dxloop_core::vector_store::VectorStore;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn demo() -> String {
    fixtures().join("demo.toml").display().to_string()
}

fn dxloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dxloop")).args(args).output().expect("spawn dxloop")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn guideline_check_reports_node_counts() {
    let tree = fixtures().join("guidelines/acute_bronchitis.tree");
    let o = dxloop(&["guideline", "check", tree.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("acute bronchitis v1: 6 nodes (2 question, 1 condition, 1 in-lab test, 2 conclusion)"), "{out}");
    assert!(out.contains("[q_cough] ASK cough"), "{out}");
}

#[test]
fn guideline_check_directory_quiet() {
    let o = dxloop(&["guideline", "check", "--quiet", fixtures().join("guidelines").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 14);
}

#[test]
fn dangling_child_is_a_domain_error() {
    let o = dxloop(&["guideline", "check", fixtures().join("dangling.tree").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("undeclared child `d_missing`"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dxloop(&["guideline", "check", "--bogus", "x"]).status.code(), Some(2));
    assert_eq!(dxloop(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(dxloop(&[]).status.code(), Some(2));
    assert_eq!(dxloop(&["eval", "score", "--transcripts", "x", "--guidelines", "y", "--judge", "oracle"]).status.code(), Some(2));
    assert_eq!(dxloop(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_config_is_a_domain_error() {
    let o = dxloop(&["--config", "/nonexistent/dx.toml", "kb", "build"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: /nonexistent/dx.toml"), "{}", stderr(&o));
}

#[test]
fn filter_train_matches_library_call() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.jsonl");
    let model = dir.path().join("model.json");
    let o = dxloop(&["filter", "generate", "--n", "200", "--seed", "4", "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = dxloop(&["filter", "train", "--data", data.to_str().unwrap(), "--augment", "--out", model.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let all = synthetic_queries(200, 4);
    let (train, held): (Vec<(usize, LabeledQuery)>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 5 != 4);
    let train: Vec<LabeledQuery> = train.into_iter().map(|(_, q)| q).collect();
    let held: Vec<LabeledQuery> = held.into_iter().map(|(_, q)| q).collect();
    let gateway = AppConfig::default().gateway().unwrap();
    let expected = train_filter(gateway.embedder(), &train, TrainingOptions::default(), Some(&gateway)).unwrap();
    let accuracy = evaluate_filter(&expected, gateway.embedder(), &held).unwrap();

    assert!(stdout(&o).contains(&format!("held-out accuracy: {accuracy:.4} (40 examples)")), "{}", stdout(&o));
    assert_eq!(FilterModel::load(&model).unwrap(), expected);
}

#[test]
fn filter_train_rejects_too_little_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.jsonl");
    std::fs::write(&data, "{\"query\":\"heart rate?\",\"needs_sensor\":true}\n").unwrap();
    let o = dxloop(&["filter", "train", "--data", data.to_str().unwrap(), "--held-out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn kb_build_then_ingest_persists_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let s = store.to_str().unwrap();
    let o = dxloop(&["--config", &demo(), "kb", "build", "--store", s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let built = VectorStore::open(&store).unwrap().len();
    assert!(stdout(&o).starts_with(&format!("chunks: {built} ")), "{}", stdout(&o));

    let trace = fixtures().join("sensors/p_resp.csv");
    let o = dxloop(&["--config", &demo(), "sensors", "ingest", trace.to_str().unwrap(), "--store", s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("rejected 0"), "{}", stdout(&o));
    let after = VectorStore::open(&store).unwrap();
    assert!(after.len() > built);

    // a rebuild replaces by source id and keeps the sensor chunks
    let o = dxloop(&["--config", &demo(), "kb", "build", "--store", s]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(VectorStore::open(&store).unwrap().len(), after.len());
}

#[test]
fn kb_sync_applies_medical_update() {
    let dir = tempfile::tempdir().unwrap();
    let event = dir.path().join("event.json");
    std::fs::write(
        &event,
        r#"{"kind":"medical-update","documents":[{"source_id":"textbook/new","kind":"textbook","text":"Tension headaches feel like a tight band."}]}"#,
    )
    .unwrap();
    let store = dir.path().join("store");
    let o = dxloop(&["--config", &demo(), "kb", "sync", "--event", event.to_str().unwrap(), "--store", store.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["added"], 1);
    assert_eq!(VectorStore::open(&store).unwrap().chunks_of("textbook/new").count(), 1);
}

#[test]
fn sensors_ingest_all_rejected_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"patient_id\":\"p\",\"metric\":\"heart_rate_bpm\",\"timestamp\":\"nope\",\"value\":70}\n").unwrap();
    let o = dxloop(&["sensors", "ingest", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("row 1:"), "{}", stdout(&o));
}

#[test]
fn simulate_and_score_match_library() {
    let dir = tempfile::tempdir().unwrap();
    let sims = dir.path().join("sims");
    let patients = fixtures().join("patients.jsonl");
    let o = dxloop(&["--config", &demo(), "eval", "simulate", "--patients", patients.to_str().unwrap(), "--out", sims.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 5);
    let o = dxloop(&[
        "--config",
        &demo(),
        "eval",
        "score",
        "--transcripts",
        sims.to_str().unwrap(),
        "--guidelines",
        fixtures().join("guidelines").to_str().unwrap(),
        "--judge",
        "scripted",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let engine = AppConfig::load(demo()).unwrap().engine().unwrap();
    let mut list = SyntheticPatient::load_jsonl(&patients).unwrap();
    list.sort_by(|a, b| a.profile_id.cmp(&b.profile_id));
    let mut rows = Vec::new();
    for p in &list {
        let sim = simulate_patient(&engine, p, &p.profile_id).unwrap();
        let kb = engine.knowledge().read().unwrap();
        let tree = kb.library.get(&p.ground_truth).map(|t| t.as_ref());
        let score = score_dialogue(engine.gateway(), &sim.transcript, &p.ground_truth, tree).unwrap();
        rows.push(ScoreRow::new(&sim.transcript, &p.ground_truth, &score).unwrap());
    }
    assert_eq!(stdout(&o), scores_csv(&rows).unwrap());
}

#[test]
fn score_plain_transcript_needs_truth() {
    let dir = tempfile::tempdir().unwrap();
    let engine = AppConfig::load(demo()).unwrap().engine().unwrap();
    let p = SyntheticPatient::load_jsonl(&fixtures().join("patients.jsonl")).unwrap().remove(0);
    let sim = simulate_patient(&engine, &p, "plain").unwrap();
    std::fs::write(dir.path().join("plain.json"), serde_json::to_string(&sim.transcript).unwrap()).unwrap();
    let args = |truth: Option<&str>| {
        let mut a = vec![
            "eval".to_string(),
            "score".into(),
            "--transcripts".into(),
            dir.path().display().to_string(),
            "--guidelines".into(),
            fixtures().join("guidelines").display().to_string(),
        ];
        if let Some(t) = truth {
            a.extend(["--truth".to_string(), t.to_string()]);
        }
        a
    };
    let o = Command::new(env!("CARGO_BIN_EXE_dxloop")).args(args(None)).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--truth"), "{}", stderr(&o));

    let truth = dir.path().join("truth.txt");
    std::fs::write(&truth, serde_json::json!({ "plain": p.ground_truth }).to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dxloop")).args(args(Some(truth.to_str().unwrap()))).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).lines().nth(1).unwrap().starts_with(&format!("plain,{}", p.ground_truth)));
}

#[test]
fn remote_judge_needs_remote_provider() {
    let o = dxloop(&[
        "eval",
        "score",
        "--transcripts",
        ".",
        "--guidelines",
        fixtures().join("guidelines").to_str().unwrap(),
        "--judge",
        "remote",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn consult_prints_probabilities_each_turn() {
    let dir = tempfile::tempdir().unwrap();
    let transcript = dir.path().join("t.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_dxloop"))
        .args([
            "--config",
            &demo(),
            "consult",
            "--patient",
            "p_gastritis",
            "--symptoms",
            "stomach discomfort with weight loss and feeling jittery",
            "--transcript",
            transcript.to_str().unwrap(),
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"Yes, a burning pain. (epigastric_pain=yes)\n\n/done\n")
        .unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("doctor [1]:") && out.contains("doctor [2]:"), "{out}");
    let rows: Vec<&str> = out.lines().filter(|l| l.trim_start().starts_with("gastritis ") && l.contains(" 0.")).collect();
    assert_eq!(rows.len(), 2, "{out}");
    assert_eq!(out.matches("doctor [").count(), 2, "{out}");
    assert!(out.contains("diagnosis report"), "{out}");
    let export: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&transcript).unwrap()).unwrap();
    assert_eq!(export["turns"].as_array().unwrap().len(), 2);
}

fn http_get(port: u16, path: &str) -> Option<String> {
    let mut s = TcpStream::connect(("127.0.0.1", port)).ok()?;
    s.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").ok()?;
    let mut body = String::new();
    s.read_to_string(&mut body).ok()?;
    Some(body)
}

#[test]
fn serve_answers_health() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dxloop"))
        .args(["--config", &demo(), "serve", "--listen", &format!("127.0.0.1:{port}")])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(60);
    let mut reply = None;
    while Instant::now() < deadline {
        if let Some(r) = http_get(port, "/v1/health") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("service never answered");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"status\":\"ok\""), "{reply}");
}
