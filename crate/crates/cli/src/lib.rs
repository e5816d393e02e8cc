//! `dxloop` command line. Each subcommand is a thin wrapper over one
//! library operation; exit codes are 0 on success, 1 on a domain error and
//! 2 on a usage error.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dxloop_core::config::{AppConfig, ConfigError, ProviderConfig, ProviderKind};
use dxloop_core::consultation::{CandidateDisease, ConsultationError, DiagnosisReport, Phase, TranscriptExport};
use dxloop_core::evaluation::{score_dialogue, scores_csv, simulate_batch, EvalError, ScoreRow, Simulation, SyntheticPatient};
use dxloop_core::guideline::{GuidelineError, GuidelineLibrary, GuidelineTree};
use dxloop_core::knowledge::{KnowledgeBase, KnowledgeError};
use dxloop_core::sensor::{evaluate_filter, synthetic_queries, train_filter, LabeledQuery, SensorError, TrainingOptions};
use dxloop_core::vector_store::{ChunkKind, SyncEvent, VectorStoreError};
use thiserror::Error;

#[derive(Debug, Parser)]
#[command(name = "dxloop", version, about = "Guideline-driven diagnostic consultations with wearable sensor knowledge")]
pub struct Cli {
    /// TOML configuration; built-in mock defaults without it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Knowledge-base administration.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Guideline tree tools.
    #[command(subcommand)]
    Guideline(GuidelineCommand),
    /// Wearable sensor data.
    #[command(subcommand)]
    Sensors(SensorsCommand),
    /// Sensor-retrieval filter.
    #[command(subcommand)]
    Filter(FilterCommand),
    /// Interactive consultation on the terminal.
    Consult(ConsultArgs),
    /// Simulated dialogues and judged scores.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum KbCommand {
    /// Chunk and embed every configured source.
    Build {
        /// Journaled store directory; overrides `knowledge.store_dir`.
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
    },
    /// Apply one sync event (JSON) to the store.
    Sync {
        #[arg(long, value_name = "FILE")]
        event: PathBuf,
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum GuidelineCommand {
    /// Validate tree files (or directories of them) and pretty-print them.
    Check {
        #[arg(required = true, value_name = "PATH")]
        paths: Vec<PathBuf>,
        /// Print only the summary line.
        #[arg(long)]
        quiet: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum SensorsCommand {
    /// Load CSV or JSON-lines records into the sensor store.
    Ingest {
        #[arg(required = true, value_name = "FILE")]
        files: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        store: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FilterCommand {
    /// Write a synthetic labeled query corpus as JSON lines.
    Generate {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Train on labeled queries, report held-out accuracy, write the model.
    Train {
        /// JSON lines of `{"query": ..., "needs_sensor": ...}`.
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Held-out set; every fifth line of `--data` when absent.
        #[arg(long, value_name = "FILE")]
        held_out: Option<PathBuf>,
        /// Add one paraphrase of every training query.
        #[arg(long)]
        augment: bool,
        /// Model path; defaults to `knowledge.filter_model`, then `sensor_filter.json`.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Args)]
pub struct ConsultArgs {
    #[arg(long)]
    pub patient: String,
    /// First symptom statement.
    #[arg(long)]
    pub symptoms: String,
    #[arg(long, default_value = "cli")]
    pub session: String,
    #[arg(long)]
    pub age_band: Option<String>,
    #[arg(long)]
    pub sex: Option<String>,
    #[arg(long)]
    pub region: Option<String>,
    /// Write the transcript export here when the session ends.
    #[arg(long, value_name = "FILE")]
    pub transcript: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeKind {
    /// Offline rubric judge.
    Scripted,
    /// The configured remote provider.
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Judge transcripts and print per-dialogue scores as CSV.
    Score {
        /// Directory of `.json` files from `eval simulate --out`, or plain
        /// transcript exports together with `--truth`.
        #[arg(long, value_name = "DIR")]
        transcripts: PathBuf,
        #[arg(long, value_name = "DIR")]
        guidelines: PathBuf,
        #[arg(long, value_enum, default_value_t = JudgeKind::Scripted)]
        judge: JudgeKind,
        /// JSON object mapping session id to true disease.
        #[arg(long, value_name = "FILE")]
        truth: Option<PathBuf>,
        /// CSV destination; stdout when absent.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Run scripted patients through the engine.
    Simulate {
        #[arg(long, value_name = "FILE")]
        patients: PathBuf,
        /// Number of sessions; patients are cycled.
        #[arg(long)]
        n: Option<usize>,
        /// One `<session>.json` per simulation goes here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides `server.listen`.
    #[arg(long)]
    pub listen: Option<String>,
    /// Overrides `server.data_dir`.
    #[arg(long, value_name = "DIR")]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Store(#[from] VectorStoreError),
    #[error(transparent)]
    Guideline(#[from] GuidelineError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Consultation(#[from] ConsultationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Service(#[from] dxloop_service::ServiceError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{0}")]
    Domain(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    Ok(match path {
        Some(p) => AppConfig::load(p)?,
        None => AppConfig::default(),
    })
}

pub fn execute(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Kb(KbCommand::Build { store }) => {
            if store.is_some() {
                config.knowledge.store_dir = store;
            }
            kb_build(&config, &mut out)
        }
        Command::Kb(KbCommand::Sync { event, store }) => {
            if store.is_some() {
                config.knowledge.store_dir = store;
            }
            kb_sync(&config, &event, &mut out)
        }
        Command::Guideline(GuidelineCommand::Check { paths, quiet }) => guideline_check(&paths, quiet, &mut out),
        Command::Sensors(SensorsCommand::Ingest { files, store }) => {
            if store.is_some() {
                config.knowledge.store_dir = store;
            }
            sensors_ingest(&config, &files, &mut out)
        }
        Command::Filter(FilterCommand::Generate { n, seed, out: path }) => filter_generate(n, seed, path.as_deref(), &mut out),
        Command::Filter(FilterCommand::Train {
            data,
            held_out,
            augment,
            out: path,
            epochs,
        }) => {
            let path = path
                .or_else(|| config.knowledge.filter_model.clone())
                .unwrap_or_else(|| PathBuf::from("sensor_filter.json"));
            let mut options = TrainingOptions::default();
            if let Some(e) = epochs {
                options.epochs = e;
            }
            filter_train(&config, &data, held_out.as_deref(), augment, options, &path, &mut out)
        }
        Command::Consult(args) => {
            let stdin = io::stdin();
            consult(&config, &args, &mut stdin.lock(), &mut out)
        }
        Command::Eval(EvalCommand::Score {
            transcripts,
            guidelines,
            judge,
            truth,
            out: path,
        }) => {
            let csv = eval_score(&config, &transcripts, &guidelines, judge, truth.as_deref())?;
            match path {
                Some(p) => write(&p, &csv),
                None => out.write_all(csv.as_bytes()).map_err(io_err(Path::new("stdout"))),
            }
        }
        Command::Eval(EvalCommand::Simulate { patients, n, out: dir }) => eval_simulate(&config, &patients, n, dir.as_deref(), &mut out),
        Command::Serve(args) => {
            if let Some(l) = args.listen {
                config.server.listen = l;
            }
            if args.data_dir.is_some() {
                config.server.data_dir = args.data_dir;
            }
            serve(config)
        }
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", text.as_ref()).map_err(io_err(Path::new("stdout")))
}

fn load_kb(config: &AppConfig) -> Result<(dxloop_core::gateway::Gateway, KnowledgeBase)> {
    let gateway = config.gateway()?;
    let kb = config.knowledge_base(&gateway)?;
    Ok((gateway, kb))
}

fn kb_build(config: &AppConfig, out: &mut dyn Write) -> Result<()> {
    let (_, mut kb) = load_kb(config)?;
    kb.store.compact()?;
    emit(
        out,
        format!(
            "chunks: {} (textbook {}, dialogue {}, sensor {}, guideline-aux {})",
            kb.store.len(),
            kb.store.count_kind(ChunkKind::Textbook),
            kb.store.count_kind(ChunkKind::Dialogue),
            kb.store.count_kind(ChunkKind::Sensor),
            kb.store.count_kind(ChunkKind::GuidelineAux),
        ),
    )?;
    emit(out, format!("guidelines: {}", kb.library.len()))?;
    emit(out, format!("symptom entries: {}", kb.symptoms.len()))?;
    emit(out, format!("sensor records: {}", kb.sensors.len()))?;
    if let Some(dir) = &config.knowledge.store_dir {
        emit(out, format!("store: {}", dir.display()))?;
    }
    Ok(())
}

fn kb_sync(config: &AppConfig, event: &Path, out: &mut dyn Write) -> Result<()> {
    let event: SyncEvent = serde_json::from_str(&read(event)?).map_err(|e| CliError::Format {
        path: event.display().to_string(),
        message: e.to_string(),
    })?;
    let (gateway, mut kb) = load_kb(config)?;
    let report = kb.sync(&event, gateway.embedder())?;
    kb.store.compact()?;
    emit(out, serde_json::to_string(&report).expect("report serializes"))
}

fn tree_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io_err(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tree"))
        .collect();
    files.sort();
    Ok(files)
}

fn guideline_check(paths: &[PathBuf], quiet: bool, out: &mut dyn Write) -> Result<()> {
    let mut failures = Vec::new();
    for path in paths {
        for file in tree_files(path)? {
            let tree = match read(&file).and_then(|src| Ok(GuidelineTree::parse(&src)?)) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("{}: {e}", file.display());
                    failures.push(file.display().to_string());
                    continue;
                }
            };
            let c = tree.counts();
            emit(
                out,
                format!(
                    "{}: ok: {} v{}: {} nodes ({} question, {} condition, {} in-lab test, {} conclusion), depth {}",
                    file.display(),
                    tree.disease(),
                    tree.version(),
                    c.total(),
                    c.question,
                    c.condition,
                    c.in_lab_test,
                    c.conclusion,
                    tree.depth()
                ),
            )?;
            if !quiet {
                emit(out, tree.render())?;
            }
        }
    }
    match failures.len() {
        0 => Ok(()),
        n => Err(CliError::Domain(format!("{n} invalid guideline file(s): {}", failures.join(", ")))),
    }
}

fn sensors_ingest(config: &AppConfig, files: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let (gateway, mut kb) = load_kb(config)?;
    let mut accepted = 0;
    for file in files {
        let report = kb.ingest_sensor_file(file, gateway.embedder())?;
        emit(
            out,
            format!(
                "{}: accepted {}, replaced {}, rejected {}",
                file.display(),
                report.accepted,
                report.replaced,
                report.rejected.len()
            ),
        )?;
        for r in &report.rejected {
            emit(out, format!("  row {}: {}", r.row, r.reason))?;
        }
        accepted += report.accepted;
    }
    kb.store.compact()?;
    emit(out, format!("sensor chunks: {}", kb.store.count_kind(ChunkKind::Sensor)))?;
    if accepted == 0 {
        return Err(CliError::Domain("no sensor records accepted".into()));
    }
    Ok(())
}

fn labeled_queries(path: &Path) -> Result<Vec<LabeledQuery>> {
    read(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Format {
                path: format!("{} line {}", path.display(), i + 1),
                message: e.to_string(),
            })
        })
        .collect()
}

fn filter_generate(n: usize, seed: u64, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let text: String = synthetic_queries(n, seed)
        .iter()
        .map(|q| serde_json::to_string(q).expect("query serializes") + "\n")
        .collect();
    match path {
        Some(p) => write(p, &text),
        None => out.write_all(text.as_bytes()).map_err(io_err(Path::new("stdout"))),
    }
}

/// Training split and held-out split; without an explicit held-out file
/// every fifth example is held out.
pub fn split_held_out(all: Vec<LabeledQuery>) -> (Vec<LabeledQuery>, Vec<LabeledQuery>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (i, q) in all.into_iter().enumerate() {
        if i % 5 == 4 {
            held.push(q);
        } else {
            train.push(q);
        }
    }
    (train, held)
}

fn filter_train(
    config: &AppConfig,
    data: &Path,
    held_out: Option<&Path>,
    augment: bool,
    options: TrainingOptions,
    model_path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let all = labeled_queries(data)?;
    let (train, held) = match held_out {
        Some(p) => (all, labeled_queries(p)?),
        None => split_held_out(all),
    };
    if held.is_empty() {
        return Err(CliError::Domain("held-out set is empty".into()));
    }
    let gateway = config.gateway()?;
    let model = train_filter(gateway.embedder(), &train, options, augment.then_some(&gateway))?;
    let accuracy = evaluate_filter(&model, gateway.embedder(), &held)?;
    model.save(model_path)?;
    emit(
        out,
        format!(
            "trained on {} examples ({} after augmentation), final loss {:.4}",
            model.metadata.original_samples, model.metadata.samples, model.metadata.final_loss
        ),
    )?;
    emit(out, format!("held-out accuracy: {accuracy:.4} ({} examples)", held.len()))?;
    emit(out, format!("model: {}", model_path.display()))
}

fn probability_table(candidates: &[CandidateDisease]) -> String {
    let mut rows: Vec<&CandidateDisease> = candidates.iter().collect();
    rows.sort_by(|a, b| a.narrowed.cmp(&b.narrowed).then(b.final_prob.total_cmp(&a.final_prob)));
    let width = rows.iter().map(|c| c.disease.len()).max().unwrap_or(0);
    rows.iter()
        .map(|c| {
            if c.narrowed {
                format!("  {:width$}  narrowed out", c.disease)
            } else {
                let bar = "#".repeat((c.final_prob * 20.0).round() as usize);
                format!("  {:width$}  {:.3}  {bar}", c.disease, c.final_prob)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn report_text(report: &DiagnosisReport) -> String {
    let mut s = format!("diagnosis report ({} turns{})\n", report.turn, if report.forced { ", forced" } else { "" });
    for (i, e) in report.entries.iter().enumerate() {
        s.push_str(&format!("{}. {} {:.3}", i + 1, e.disease, e.final_prob));
        if let Some(c) = &e.conclusion {
            s.push_str(&format!(" (guideline conclusion: {c})"));
        }
        s.push('\n');
        if !e.explanation.is_empty() {
            s.push_str(&format!("   {}\n", e.explanation));
        }
    }
    for r in &report.ruled_out {
        s.push_str(&format!("ruled out: {}\n", r.disease));
    }
    s
}

/// Reads patient replies from `input` until the doctor concludes, the
/// input ends, or the patient types `/done`.
pub fn consult(config: &AppConfig, args: &ConsultArgs, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let engine = config.engine()?;
    let demographics = dxloop_core::consultation::Demographics {
        age_band: args.age_band.clone(),
        sex: args.sex.clone(),
        region: args.region.clone(),
    };
    let (mut state, mut turn) = engine.start(&args.session, &args.patient, &args.symptoms, demographics)?;
    loop {
        emit(out, format!("doctor [{}]: {}", turn.turn, turn.doctor_message.trim()))?;
        emit(out, format!("  {}", turn.action.to_line()))?;
        if turn.retrieval_info.performed {
            let reliable = match turn.retrieval_info.reliable {
                Some(true) => "reliable",
                Some(false) => "unreliable",
                None => "no data",
            };
            emit(out, format!("  sensor data retrieved ({reliable})"))?;
        }
        emit(out, probability_table(&turn.candidates))?;
        if state.phase == Phase::Concluded {
            break;
        }
        let next = loop {
            write!(out, "you> ").and_then(|_| out.flush()).map_err(io_err(Path::new("stdout")))?;
            let mut line = String::new();
            let n = input.read_line(&mut line).map_err(io_err(Path::new("stdin")))?;
            let line = line.trim();
            if n == 0 || line == "/done" {
                emit(out, "")?;
                break None;
            }
            if line.is_empty() {
                continue;
            }
            match engine.step(&mut state, line) {
                Ok(t) => break Some(t),
                Err(e @ ConsultationError::Precondition(_)) => emit(out, format!("  ({e})"))?,
                Err(e) => return Err(e.into()),
            }
        };
        match next {
            Some(t) => turn = t,
            None => break,
        }
    }
    let report = engine.finalize(&mut state);
    emit(out, report_text(&report))?;
    if let Some(p) = &args.transcript {
        write(p, &state.transcript_json())?;
    }
    Ok(())
}

fn transcript_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Judged score rows as CSV with a trailing mean row.
pub fn eval_score(config: &AppConfig, dir: &Path, guidelines: &Path, judge: JudgeKind, truth: Option<&Path>) -> Result<String> {
    let judge = match judge {
        JudgeKind::Scripted => ProviderConfig::default().gateway()?,
        JudgeKind::Remote if config.provider.kind == ProviderKind::Remote => config.gateway()?,
        JudgeKind::Remote => return Err(CliError::Domain("--judge remote needs provider.kind = \"remote\" in the config".into())),
    };
    let library = GuidelineLibrary::load_dir(guidelines)?;
    let truth: BTreeMap<String, String> = match truth {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| CliError::Format {
            path: p.display().to_string(),
            message: e.to_string(),
        })?,
        None => BTreeMap::new(),
    };
    let mut rows = Vec::new();
    for file in transcript_files(dir)? {
        let format_err = |message: String| CliError::Format {
            path: file.display().to_string(),
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&read(&file)?).map_err(|e| format_err(e.to_string()))?;
        let (transcript, ground_truth) = if value.get("transcript").is_some_and(|t| t.is_object()) {
            let sim: Simulation = serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
            (sim.transcript, sim.ground_truth)
        } else {
            let t: TranscriptExport = serde_json::from_value(value).map_err(|e| format_err(e.to_string()))?;
            let g = truth
                .get(&t.session_id)
                .cloned()
                .ok_or_else(|| format_err(format!("no true disease for session {} (see --truth)", t.session_id)))?;
            (t, g)
        };
        let tree = library.get(&ground_truth).map(|t| t.as_ref());
        let score = score_dialogue(&judge, &transcript, &ground_truth, tree)?;
        rows.push(ScoreRow::new(&transcript, &ground_truth, &score)?);
    }
    if rows.is_empty() {
        return Err(CliError::Domain(format!("no .json transcripts in {}", dir.display())));
    }
    Ok(scores_csv(&rows)?)
}

fn eval_simulate(config: &AppConfig, patients: &Path, n: Option<usize>, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let engine = config.engine()?;
    let patients = SyntheticPatient::load_jsonl(patients)?;
    let n = n.unwrap_or(patients.len());
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let mut failed = 0;
    for (i, result) in simulate_batch(&engine, &patients, n).into_iter().enumerate() {
        match result {
            Ok(sim) => {
                emit(
                    out,
                    format!(
                        "{}: {} turns, diagnosis {}, truth {}, retrievals {}{}",
                        sim.transcript.session_id,
                        sim.transcript.turns.len(),
                        sim.transcript.final_diagnosis().unwrap_or("none"),
                        sim.ground_truth,
                        sim.transcript.retrieval_count(),
                        if sim.truncated { ", truncated" } else { "" }
                    ),
                )?;
                if let Some(d) = dir {
                    let path = d.join(format!("{}.json", sim.transcript.session_id));
                    write(&path, &serde_json::to_string_pretty(&sim).expect("simulation serializes"))?;
                }
            }
            Err(e) => {
                failed += 1;
                eprintln!("session {i}: {e}");
            }
        }
    }
    match failed {
        0 => Ok(()),
        f => Err(CliError::Domain(format!("{f} of {n} simulations failed"))),
    }
}

fn serve(config: AppConfig) -> Result<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(io::stderr)
        .try_init();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(io_err(Path::new("runtime")))?;
    Ok(runtime.block_on(dxloop_service::serve(config))?)
}
