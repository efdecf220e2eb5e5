//! Append-only event journal and snapshot files.
//!
//! Both files start with a header line naming the format and version.
//! Journal lines after the header are one event each; the snapshot holds a
//! single object with the facts and the last sequence number it covers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{EngineDecision, MemoryFact};

pub const JOURNAL_FORMAT: &str = "neusymms-journal";
pub const SNAPSHOT_FORMAT: &str = "neusymms-snapshot";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    FactCreated,
    FactUpdated,
    FactDeactivated,
    FactReactivated,
    DecisionApplied,
    Cleared,
}

impl EventKind {
    /// Whether events of this kind carry a fact snapshot that changes state.
    pub fn mutates(self) -> bool {
        matches!(
            self,
            EventKind::FactCreated | EventKind::FactUpdated | EventKind::FactDeactivated | EventKind::FactReactivated
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Engine,
    Api,
    Lifecycle,
    Cli,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Engine => "engine",
            Actor::Api => "api",
            Actor::Lifecycle => "lifecycle",
            Actor::Cli => "cli",
        }
    }
}

/// One journal line. Mutation events carry the fact as it is after the
/// change, so replay is a matter of writing snapshots back in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEvent {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub kind: EventKind,
    pub actor: Actor,
    pub user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fact: Option<MemoryFact>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<EngineDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub last_sequence: u64,
    pub facts: Vec<MemoryFact>,
}

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format { path: PathBuf, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FileError + '_ {
    move |source| FileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn header_line(format: &str) -> String {
    serde_json::to_string(&Header {
        format: format.to_string(),
        version: FORMAT_VERSION,
    })
    .expect("header serializes")
}

fn check_header(path: &Path, line: Option<&str>, format: &str) -> Result<(), FileError> {
    let bad = |message: String| FileError::Format {
        path: path.to_path_buf(),
        line: 1,
        message,
    };
    let line = line.ok_or_else(|| bad("missing header line".into()))?;
    let header: Header = serde_json::from_str(line).map_err(|e| bad(format!("bad header: {e}")))?;
    if header.format != format {
        return Err(bad(format!("expected format `{format}`, found `{}`", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", header.version)));
    }
    Ok(())
}

/// Appends event lines to a journal file.
#[derive(Debug)]
pub struct JournalWriter {
    path: PathBuf,
    file: File,
}

impl JournalWriter {
    /// Opens `path` for appending, writing a header when the file is new.
    pub fn open(path: &Path) -> Result<Self, FileError> {
        let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        if fresh {
            writeln!(file, "{}", header_line(JOURNAL_FORMAT)).map_err(io_err(path))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Writes all events in one call and flushes them to the device.
    pub fn append(&mut self, events: &[JournalEvent]) -> Result<(), FileError> {
        let mut buf = String::new();
        for e in events {
            buf.push_str(&serde_json::to_string(e).expect("events serialize"));
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<JournalEvent>, FileError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines.next().transpose().map_err(io_err(path))?;
    check_header(path, first.as_deref(), JOURNAL_FORMAT)?;
    let mut events = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| FileError::Format {
            path: path.to_path_buf(),
            line: i + 2,
            message: e.to_string(),
        })?;
        events.push(event);
    }
    Ok(events)
}

/// Rewrites a journal file to hold `events` only, via a temporary file.
pub fn write_journal(path: &Path, events: &[JournalEvent]) -> Result<(), FileError> {
    let mut text = header_line(JOURNAL_FORMAT);
    text.push('\n');
    for e in events {
        text.push_str(&serde_json::to_string(e).expect("events serialize"));
        text.push('\n');
    }
    write_atomic(path, &text)
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot, FileError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.splitn(2, '\n');
    check_header(path, lines.next(), SNAPSHOT_FORMAT)?;
    serde_json::from_str(lines.next().unwrap_or_default()).map_err(|e| FileError::Format {
        path: path.to_path_buf(),
        line: 2,
        message: e.to_string(),
    })
}

pub fn write_snapshot(path: &Path, snapshot: &Snapshot) -> Result<(), FileError> {
    let text = format!(
        "{}\n{}\n",
        header_line(SNAPSHOT_FORMAT),
        serde_json::to_string(snapshot).expect("snapshot serializes")
    );
    write_atomic(path, &text)
}

fn write_atomic(path: &Path, text: &str) -> Result<(), FileError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
