//! On-disk layout of a store directory:
//!
//! ```text
//! <dir>/snapshot.json   {"format":"dxloop-vector-snapshot","version":1,"dim":256,
//!                        "next_id":N,"last_seq":S,"entries":[{id,chunk,vector},...]}
//! <dir>/records.jsonl   one {"seq":n,"op":"upsert"|"remove-source"|"remove-span",...}
//!                       per line, appended after every mutation
//! ```
//!
//! Opening a directory loads the snapshot, then replays journal records with
//! `seq > last_seq`. A torn final line (no trailing newline) is discarded.
//! [`VectorStore::compact`] folds the journal into a fresh snapshot.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Chunk, ChunkId, EmbeddingVector, Result, StoredChunk, VectorStore, VectorStoreError};

pub const SNAPSHOT_FORMAT: &str = "dxloop-vector-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

const SNAPSHOT_FILE: &str = "snapshot.json";
const JOURNAL_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub(crate) enum JournalOp {
    Upsert {
        id: ChunkId,
        chunk: Chunk,
        vector: EmbeddingVector,
    },
    RemoveSource {
        source_id: String,
    },
    RemoveSpan {
        source_id: String,
        span: (usize, usize),
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalRecord {
    seq: u64,
    #[serde(flatten)]
    op: JournalOp,
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    dim: Option<usize>,
    next_id: u64,
    last_seq: u64,
    entries: Vec<StoredChunk>,
}

#[derive(Debug)]
pub(crate) struct Journal {
    dir: PathBuf,
    file: File,
    seq: u64,
}

impl Journal {
    pub(crate) fn append(&mut self, op: &JournalOp) -> Result<()> {
        let record = JournalRecord {
            seq: self.seq + 1,
            op: op.clone(),
        };
        let mut line = serde_json::to_string(&record).map_err(|e| corrupt(&self.dir, e))?;
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|source| io_err(&self.dir.join(JOURNAL_FILE), source))?;
        self.seq += 1;
        Ok(())
    }
}

fn io_err(path: &Path, source: std::io::Error) -> VectorStoreError {
    VectorStoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, message: impl ToString) -> VectorStoreError {
    VectorStoreError::Corrupt {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let snapshot: Snapshot = serde_json::from_str(&text).map_err(|e| corrupt(path, e))?;
    if snapshot.format != SNAPSHOT_FORMAT || snapshot.version != SNAPSHOT_VERSION {
        return Err(corrupt(
            path,
            format!(
                "unsupported snapshot {} v{} (expected {SNAPSHOT_FORMAT} v{SNAPSHOT_VERSION})",
                snapshot.format, snapshot.version
            ),
        ));
    }
    Ok(snapshot)
}

impl VectorStore {
    /// Opens (or creates) a journaled store directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let snapshot_path = dir.join(SNAPSHOT_FILE);
        let (mut store, mut seq) = if snapshot_path.exists() {
            let s = read_snapshot(&snapshot_path)?;
            (VectorStore::restore(s.dim, s.next_id, s.entries), s.last_seq)
        } else {
            (VectorStore::new(), 0)
        };

        let journal_path = dir.join(JOURNAL_FILE);
        if journal_path.exists() {
            let valid_len = replay(&mut store, &journal_path, &mut seq)?;
            let file = OpenOptions::new()
                .write(true)
                .open(&journal_path)
                .map_err(|e| io_err(&journal_path, e))?;
            file.set_len(valid_len).map_err(|e| io_err(&journal_path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&journal_path)
            .map_err(|e| io_err(&journal_path, e))?;
        store.journal = Some(Journal { dir, file, seq });
        Ok(store)
    }

    /// Writes a snapshot of the current state and empties the journal.
    pub fn compact(&mut self) -> Result<()> {
        let Some(journal) = &self.journal else {
            return Ok(());
        };
        let dir = journal.dir.clone();
        let seq = journal.seq;
        self.write_snapshot(&dir.join(SNAPSHOT_FILE), seq)?;
        let journal_path = dir.join(JOURNAL_FILE);
        let file = File::create(&journal_path).map_err(|e| io_err(&journal_path, e))?;
        drop(file);
        let file = OpenOptions::new()
            .append(true)
            .open(&journal_path)
            .map_err(|e| io_err(&journal_path, e))?;
        self.journal = Some(Journal { dir, file, seq });
        Ok(())
    }

    /// Standalone snapshot export; the store need not be journaled.
    pub fn save_snapshot(&self, path: impl AsRef<Path>) -> Result<()> {
        let seq = self.journal.as_ref().map_or(0, |j| j.seq);
        self.write_snapshot(path.as_ref(), seq)
    }

    pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Self> {
        let s = read_snapshot(path.as_ref())?;
        Ok(VectorStore::restore(s.dim, s.next_id, s.entries))
    }

    fn write_snapshot(&self, path: &Path, last_seq: u64) -> Result<()> {
        let snapshot = Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            dim: self.dim(),
            next_id: self.next_id(),
            last_seq,
            entries: self.iter().cloned().collect(),
        };
        let tmp = path.with_extension("json.tmp");
        let body = serde_json::to_vec(&snapshot).map_err(|e| corrupt(path, e))?;
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))
    }
}

/// Applies journal records newer than `seq`; returns the byte length of the
/// well-formed prefix.
fn replay(store: &mut VectorStore, path: &Path, seq: &mut u64) -> Result<u64> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);
    let mut valid_len = 0u64;
    let mut line = String::new();
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.ends_with('\n') {
            tracing::warn!(path = %path.display(), "discarding torn journal tail");
            break;
        }
        let record: JournalRecord = serde_json::from_str(line.trim_end())
            .map_err(|e| corrupt(path, format!("line {line_no}: {e}")))?;
        valid_len += n as u64;
        if record.seq <= *seq {
            continue;
        }
        *seq = record.seq;
        match record.op {
            JournalOp::Upsert { id, chunk, vector } => store.put(StoredChunk { id, chunk, vector }),
            JournalOp::RemoveSource { source_id } => store.drop_source(&source_id),
            JournalOp::RemoveSpan { source_id, span } => store.drop_span(&source_id, span),
        }
    }
    Ok(valid_len)
}
