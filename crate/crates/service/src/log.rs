//! Append-only session log, one JSON-lines file per session.
//!
//! Each line is `{"checksum":"<sha256 hex of record>","record":{...}}` and
//! every record carries the full session after the event it logs, so the
//! last valid line is the session. Files are compacted to a single
//! snapshot record once they reach `compact_after` lines.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use dxloop_core::consultation::{Phase, SessionState};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};

pub const DEFAULT_COMPACT_AFTER: usize = 32;

/// Session metadata exposed by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSession {
    pub session_id: String,
    pub patient_id: String,
    pub phase: Phase,
    /// Completed doctor turns.
    pub turn_count: usize,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

impl ApiSession {
    pub fn new(state: &SessionState) -> Self {
        let now = Utc::now();
        Self {
            session_id: state.session_id.clone(),
            patient_id: state.patient_id.clone(),
            phase: state.phase,
            turn_count: state.doctor_turns(),
            created_at: now,
            updated_at: now,
        }
    }

    /// Metadata after `state` replaced the session; `updated_at` never decreases.
    pub fn advanced(&self, state: &SessionState) -> Self {
        Self {
            phase: state.phase,
            turn_count: state.doctor_turns(),
            updated_at: Utc::now().max(self.updated_at),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Created,
    Turn,
    Finalized,
    Snapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub kind: RecordKind,
    pub meta: ApiSession,
    pub state: SessionState,
}

#[derive(Deserialize)]
struct Line<'a> {
    checksum: String,
    #[serde(borrow)]
    record: &'a RawValue,
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode(record: &LogRecord) -> io::Result<String> {
    let body = serde_json::to_string(record).map_err(io::Error::other)?;
    Ok(format!("{{\"checksum\":\"{}\",\"record\":{body}}}\n", checksum(body.as_bytes())))
}

#[derive(Debug)]
pub enum Recovered {
    Live {
        record: LogRecord,
        lines: usize,
        /// A torn final line was cut off.
        truncated: bool,
    },
    Quarantined {
        session_id: String,
        reason: String,
    },
}

#[derive(Debug, Clone)]
pub struct SessionLog {
    dir: PathBuf,
    compact_after: usize,
}

/// Session ids double as file names.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl SessionLog {
    pub fn open(data_dir: &Path, compact_after: usize) -> io::Result<Self> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            compact_after: compact_after.max(2),
        })
    }

    pub fn path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    /// Appends one record and returns the file's line count afterwards,
    /// compacting first when the file is full. Durable on return.
    pub fn append(&self, record: &LogRecord, lines: usize) -> io::Result<usize> {
        if lines + 1 >= self.compact_after {
            self.compact(record)?;
            return Ok(1);
        }
        let line = encode(record)?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.path(&record.meta.session_id))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(lines + 1)
    }

    /// Replaces the file with a single snapshot of `record`.
    pub fn compact(&self, record: &LogRecord) -> io::Result<()> {
        let snapshot = LogRecord {
            kind: RecordKind::Snapshot,
            ..record.clone()
        };
        let path = self.path(&record.meta.session_id);
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(encode(&snapshot)?.as_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    /// Reads every session file. Leftover temp files are removed.
    pub fn recover(&self) -> io::Result<Vec<Recovered>> {
        let mut paths: Vec<PathBuf> = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            match path.extension().and_then(|x| x.to_str()) {
                Some("jsonl") => paths.push(path),
                Some("tmp") => fs::remove_file(&path)?,
                _ => {}
            }
        }
        paths.sort();
        let mut out = Vec::with_capacity(paths.len());
        for path in paths {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push(match recover_file(&path, &id)? {
                FileOutcome::Empty => {
                    fs::remove_file(&path)?;
                    continue;
                }
                FileOutcome::Live(record, lines, truncated) => {
                    if truncated {
                        tracing::warn!(session = %id, "torn log tail rolled back");
                    }
                    Recovered::Live { record, lines, truncated }
                }
                FileOutcome::Bad(reason) => {
                    tracing::error!(session = %id, %reason, "session quarantined");
                    Recovered::Quarantined { session_id: id, reason }
                }
            });
        }
        Ok(out)
    }
}

enum FileOutcome {
    Live(LogRecord, usize, bool),
    /// Nothing was ever completely written.
    Empty,
    Bad(String),
}

fn recover_file(path: &Path, id: &str) -> io::Result<FileOutcome> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    let truncated = complete < bytes.len();
    if truncated {
        let f = OpenOptions::new().write(true).open(path)?;
        f.set_len(complete as u64)?;
        f.sync_all()?;
    }
    let mut last: Option<LogRecord> = None;
    let mut lines = 0;
    for (i, raw) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if raw.is_empty() {
            continue;
        }
        let n = i + 1;
        let line: Line = match serde_json::from_slice(raw) {
            Ok(l) => l,
            Err(e) => return Ok(FileOutcome::Bad(format!("line {n}: {e}"))),
        };
        if checksum(line.record.get().as_bytes()) != line.checksum {
            return Ok(FileOutcome::Bad(format!("line {n}: checksum mismatch")));
        }
        let record: LogRecord = match serde_json::from_str(line.record.get()) {
            Ok(r) => r,
            Err(e) => return Ok(FileOutcome::Bad(format!("line {n}: {e}"))),
        };
        if record.meta.session_id != id || record.state.session_id != id {
            return Ok(FileOutcome::Bad(format!("line {n}: record belongs to another session")));
        }
        if last.as_ref().is_some_and(|p| p.seq >= record.seq) {
            return Ok(FileOutcome::Bad(format!("line {n}: sequence number does not increase")));
        }
        last = Some(record);
        lines += 1;
    }
    Ok(match last {
        Some(r) => FileOutcome::Live(r, lines, truncated),
        None => FileOutcome::Empty,
    })
}
