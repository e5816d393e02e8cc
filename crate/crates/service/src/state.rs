use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use dxloop_core::consultation::{Engine, SessionState};
use tokio::sync::{Mutex, OwnedMutexGuard};

use crate::error::ApiError;
use crate::log::{ApiSession, LogRecord, RecordKind, Recovered, SessionLog, DEFAULT_COMPACT_AFTER};

#[derive(Debug, Clone, Default)]
pub struct ServiceOptions {
    /// Session logs and consent live here; `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    /// Required as `Authorization: Bearer <key>` or `x-api-key` when set.
    pub api_key: Option<String>,
    /// Log lines per session before compaction; 0 picks the default.
    pub compact_after: usize,
}

#[derive(Debug)]
pub struct Entry {
    pub meta: ApiSession,
    pub state: SessionState,
    lines: usize,
    seq: u64,
}

#[derive(Debug, Clone)]
enum Slot {
    Live(Arc<Mutex<Entry>>),
    Quarantined(String),
}

pub type SessionGuard = OwnedMutexGuard<Entry>;

/// Shared by all handlers. Cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    engine: Engine,
    sessions: RwLock<HashMap<String, Slot>>,
    log: Option<SessionLog>,
    consent_file: Option<PathBuf>,
    api_key: Option<String>,
}

impl AppState {
    /// Restores consent and every logged session from `data_dir`.
    pub fn new(engine: Engine, options: ServiceOptions) -> std::io::Result<Self> {
        let mut sessions = HashMap::new();
        let (log, consent_file) = match &options.data_dir {
            Some(dir) => {
                let compact = if options.compact_after == 0 {
                    DEFAULT_COMPACT_AFTER
                } else {
                    options.compact_after
                };
                let log = SessionLog::open(dir, compact)?;
                for r in log.recover()? {
                    match r {
                        Recovered::Live { record, lines, .. } => {
                            let id = record.meta.session_id.clone();
                            let entry = Entry {
                                meta: record.meta,
                                state: record.state,
                                lines,
                                seq: record.seq,
                            };
                            sessions.insert(id, Slot::Live(Arc::new(Mutex::new(entry))));
                        }
                        Recovered::Quarantined { session_id, reason } => {
                            sessions.insert(session_id, Slot::Quarantined(reason));
                        }
                    }
                }
                let consent = dir.join("consent.json");
                load_consent(&engine, &consent)?;
                (Some(log), Some(consent))
            }
            None => (None, None),
        };
        Ok(Self {
            inner: Arc::new(Inner {
                engine,
                sessions: RwLock::new(sessions),
                log,
                consent_file,
                api_key: options.api_key,
            }),
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    pub fn api_key(&self) -> Option<&str> {
        self.inner.api_key.as_deref()
    }

    fn slot(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        let map = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
        match map.get(id) {
            Some(Slot::Live(m)) => Ok(Arc::clone(m)),
            Some(Slot::Quarantined(reason)) => Err(ApiError::quarantined(id, reason)),
            None => Err(ApiError::not_found("session", id)),
        }
    }

    /// Waits for any in-flight turn.
    pub async fn lock(&self, id: &str) -> Result<SessionGuard, ApiError> {
        Ok(self.slot(id)?.lock_owned().await)
    }

    /// Fails with 429 while another turn is in flight.
    pub fn try_lock(&self, id: &str) -> Result<SessionGuard, ApiError> {
        self.slot(id)?.try_lock_owned().map_err(|_| ApiError::busy(id))
    }

    /// Registers and logs a new session; 409 when the id is taken.
    pub fn insert(&self, state: SessionState) -> Result<ApiSession, ApiError> {
        let id = state.session_id.clone();
        let meta = ApiSession::new(&state);
        let slot = Arc::new(Mutex::new(Entry {
            meta: meta.clone(),
            state,
            lines: 0,
            seq: 0,
        }));
        let mut guard = Arc::clone(&slot).try_lock_owned().expect("fresh lock");
        {
            let mut map = self.inner.sessions.write().unwrap_or_else(|e| e.into_inner());
            if map.contains_key(&id) {
                return Err(ApiError::new(
                    axum::http::StatusCode::CONFLICT,
                    "session_exists",
                    format!("session {id:?} already exists"),
                ));
            }
            map.insert(id.clone(), Slot::Live(slot));
        }
        if let Err(e) = self.write(&mut guard, RecordKind::Created) {
            self.inner.sessions.write().unwrap_or_else(|e| e.into_inner()).remove(&id);
            return Err(e);
        }
        Ok(meta)
    }

    /// Logs `state` as the session's next record, then makes it current.
    /// On a log failure the session keeps its previous state.
    pub fn commit(&self, guard: &mut SessionGuard, state: SessionState, kind: RecordKind) -> Result<(), ApiError> {
        let previous = std::mem::replace(&mut guard.state, state);
        let meta = guard.meta.clone();
        guard.meta = meta.advanced(&guard.state);
        if let Err(e) = self.write(guard, kind) {
            guard.state = previous;
            guard.meta = meta;
            return Err(e);
        }
        Ok(())
    }

    fn write(&self, entry: &mut Entry, kind: RecordKind) -> Result<(), ApiError> {
        let Some(log) = &self.inner.log else {
            return Ok(());
        };
        let seq = if kind == RecordKind::Created { 0 } else { entry.seq + 1 };
        let record = LogRecord {
            seq,
            kind,
            meta: entry.meta.clone(),
            state: entry.state.clone(),
        };
        entry.lines = log.append(&record, entry.lines)?;
        entry.seq = seq;
        Ok(())
    }

    /// (live, quarantined) session counts.
    pub fn counts(&self) -> (usize, usize) {
        let map = self.inner.sessions.read().unwrap_or_else(|e| e.into_inner());
        let q = map.values().filter(|s| matches!(s, Slot::Quarantined(_))).count();
        (map.len() - q, q)
    }

    pub fn set_consent(&self, patient_id: &str, granted: bool) -> Result<(), ApiError> {
        let consent = self.inner.engine.consent();
        let before = consent.get(patient_id);
        consent.set(patient_id, granted);
        if let Some(path) = &self.inner.consent_file {
            if let Err(e) = save_consent(consent.snapshot(), path) {
                consent.set(patient_id, before);
                return Err(e.into());
            }
        }
        Ok(())
    }
}

fn load_consent(engine: &Engine, path: &Path) -> std::io::Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(e),
    };
    let map: BTreeMap<String, bool> = serde_json::from_str(&text).map_err(std::io::Error::other)?;
    for (patient, granted) in map {
        engine.consent().set(&patient, granted);
    }
    Ok(())
}

fn save_consent(map: HashMap<String, bool>, path: &Path) -> std::io::Result<()> {
    let sorted: BTreeMap<String, bool> = map.into_iter().collect();
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&sorted).map_err(std::io::Error::other)?)?;
    std::fs::File::open(&tmp)?.sync_all()?;
    std::fs::rename(tmp, path)
}
