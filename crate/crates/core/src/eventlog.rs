//! Append-only JSONL session logs, one file per session. Every line is
//! `{"sha256":"<hex>","event":<event json>}` where the digest covers the
//! exact bytes of the event JSON.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{EventSink, SinkError};
use crate::interview::{ApplyError, SessionEvent, SessionState};

#[derive(Debug, Error)]
pub enum EventLogError {
    #[error("invalid session id `{0}`")]
    InvalidSessionId(String),
    #[error("session `{0}` not found")]
    NotFound(String),
    #[error("event log {path} is corrupt at line {line}: {reason}")]
    CorruptEventLog { path: PathBuf, line: usize, reason: String },
    #[error("replay failed: {0}")]
    Replay(#[from] ApplyError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const PREFIX: &str = "{\"sha256\":\"";
const INFIX: &str = "\",\"event\":";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> EventLogError + '_ {
    move |source| EventLogError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn valid_session_id(id: &str) -> bool {
    (1..=64).contains(&id.len()) && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

pub fn encode_line(event: &SessionEvent) -> String {
    let body = serde_json::to_string(event).expect("events serialize");
    let digest = hex::encode(Sha256::digest(body.as_bytes()));
    format!("{PREFIX}{digest}{INFIX}{body}}}")
}

pub fn decode_line(line: &str) -> Result<SessionEvent, String> {
    let rest = line.strip_prefix(PREFIX).ok_or("missing checksum prefix")?;
    let (digest, rest) = rest.split_at_checked(64).ok_or("truncated checksum")?;
    let body = rest
        .strip_prefix(INFIX)
        .and_then(|r| r.strip_suffix('}'))
        .ok_or("malformed envelope")?;
    if hex::encode(Sha256::digest(body.as_bytes())) != digest {
        return Err("checksum mismatch".into());
    }
    serde_json::from_str(body).map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
pub struct EventStore {
    dir: PathBuf,
}

impl EventStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, EventLogError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, session_id: &str) -> Result<PathBuf, EventLogError> {
        if !valid_session_id(session_id) {
            return Err(EventLogError::InvalidSessionId(session_id.to_owned()));
        }
        Ok(self.dir.join(format!("{session_id}.jsonl")))
    }

    pub fn exists(&self, session_id: &str) -> bool {
        self.path(session_id).is_ok_and(|p| p.exists())
    }

    /// Appends and fsyncs one event.
    pub fn append(&self, event: &SessionEvent) -> Result<(), EventLogError> {
        let path = self.path(&event.session_id)?;
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io(&path))?;
        let mut line = encode_line(event);
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io(&path))?;
        file.sync_data().map_err(io(&path))
    }

    pub fn read(&self, session_id: &str) -> Result<Vec<SessionEvent>, EventLogError> {
        let path = self.path(session_id)?;
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(EventLogError::NotFound(session_id.to_owned()))
            }
            Err(e) => return Err(io(&path)(e)),
        };
        let mut events = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let event = decode_line(&line).map_err(|reason| EventLogError::CorruptEventLog {
                path: path.clone(),
                line: i + 1,
                reason,
            })?;
            events.push(event);
        }
        Ok(events)
    }

    pub fn replay(&self, session_id: &str) -> Result<SessionState, EventLogError> {
        Ok(SessionState::replay(&self.read(session_id)?)?)
    }

    pub fn list(&self) -> Result<Vec<String>, EventLogError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(io(&self.dir))? {
            let entry = entry.map_err(io(&self.dir))?;
            let name = entry.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".jsonl")) {
                if valid_session_id(id) {
                    ids.push(id.to_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn purge(&self, session_id: &str) -> Result<bool, EventLogError> {
        let path = self.path(session_id)?;
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io(&path)(e)),
        }
    }

    pub fn sink(&self) -> StoreSink<'_> {
        StoreSink(self)
    }
}

pub struct StoreSink<'a>(&'a EventStore);

impl EventSink for StoreSink<'_> {
    fn record(&mut self, event: &SessionEvent) -> Result<(), SinkError> {
        self.0.append(event).map_err(|e| SinkError(e.to_string()))
    }
}
