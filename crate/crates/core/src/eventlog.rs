//! Append-only event log and checksummed snapshots.
//!
//! Each record is one line: `<byte length> <crc32 hex> <json>\n`, where the
//! length and CRC cover the JSON text. Appends are fsynced before
//! [`EventLog::append`] returns.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{Engine, EngineConfig, EngineState, Event};
use crate::ontology::OntologyGraph;
use crate::{Error, Result};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLogRecord {
    pub seq: u64,
    pub timestamp: i64,
    pub event: Event,
}

pub fn encode_record(record: &EventLogRecord) -> Result<String> {
    let json = serde_json::to_string(record)?;
    Ok(format!("{} {:08x} {}\n", json.len(), crc32fast::hash(json.as_bytes()), json))
}

fn decode_line(line: &str, lineno: usize) -> Result<EventLogRecord> {
    let bad = |message: String| Error::Parse { line: lineno, message };
    let mut parts = line.splitn(3, ' ');
    let len: usize = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing record length".into()))?;
    let crc = parts
        .next()
        .and_then(|s| u32::from_str_radix(s, 16).ok())
        .ok_or_else(|| bad("missing record checksum".into()))?;
    let json = parts.next().ok_or_else(|| bad("missing record body".into()))?;
    if json.len() != len {
        return Err(bad(format!("length {} does not match header {len}", json.len())));
    }
    if crc32fast::hash(json.as_bytes()) != crc {
        return Err(Error::Integrity(format!("checksum mismatch on log line {lineno}")));
    }
    serde_json::from_str(json).map_err(|e| bad(e.to_string()))
}

/// Parses a whole log. Sequence numbers must strictly increase.
pub fn decode_log(text: &str) -> Result<Vec<EventLogRecord>> {
    let mut out: Vec<EventLogRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let rec = decode_line(line, i + 1)?;
        if let Some(prev) = out.last() {
            if rec.seq <= prev.seq {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("sequence {} after {}", rec.seq, prev.seq),
                });
            }
        }
        out.push(rec);
    }
    Ok(out)
}

/// A log file opened for appending.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

impl EventLog {
    /// Opens or creates the log, validating existing records.
    pub fn open(path: impl AsRef<Path>) -> Result<(EventLog, Vec<EventLogRecord>)> {
        let path = path.as_ref().to_path_buf();
        let existing = match std::fs::read_to_string(&path) {
            Ok(text) => decode_log(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let next_seq = existing.last().map_or(1, |r| r.seq + 1);
        Ok((EventLog { path, file, next_seq }, existing))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Writes and fsyncs one record.
    pub fn append(&mut self, event: Event, timestamp: i64) -> Result<EventLogRecord> {
        let record = EventLogRecord {
            seq: self.next_seq,
            timestamp,
            event,
        };
        self.file.write_all(encode_record(&record)?.as_bytes())?;
        self.file.sync_data()?;
        self.next_seq += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    /// Sequence number of the last event folded into `state`.
    pub high_water: u64,
    /// SHA-256 of the canonical JSON of `state`.
    pub checksum: String,
    pub state: EngineState,
}

pub fn state_digest(state: &EngineState) -> Result<String> {
    let json = serde_json::to_vec(state)?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl Snapshot {
    pub fn capture(engine: &Engine, high_water: u64) -> Result<Snapshot> {
        Ok(Snapshot {
            version: SNAPSHOT_VERSION,
            high_water,
            checksum: state_digest(engine.state())?,
            state: engine.state().clone(),
        })
    }

    pub fn verify(&self) -> Result<()> {
        if self.version != SNAPSHOT_VERSION {
            return Err(Error::Integrity(format!("unsupported snapshot version {}", self.version)));
        }
        if state_digest(&self.state)? != self.checksum {
            return Err(Error::Integrity("snapshot checksum mismatch".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Snapshot> {
        let snap: Snapshot = serde_json::from_str(text)?;
        snap.verify()?;
        Ok(snap)
    }

    /// Writes to a temporary sibling and renames over `path`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(self.to_json()?.as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Snapshot> {
        Snapshot::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Rebuilds an engine from an optional snapshot plus the records after its
/// high-water mark. Records must continue the sequence without gaps.
pub fn restore(
    graph: OntologyGraph,
    config: EngineConfig,
    snapshot: Option<Snapshot>,
    records: &[EventLogRecord],
) -> Result<Engine> {
    let (mut engine, high_water) = match snapshot {
        Some(s) => {
            s.verify()?;
            config.validate()?;
            (Engine::from_state(s.state, config), s.high_water)
        }
        None => (Engine::new(graph, config)?, 0),
    };
    let mut expected = high_water + 1;
    for rec in records.iter().filter(|r| r.seq > high_water) {
        if rec.seq != expected {
            return Err(Error::SequenceGap {
                expected,
                found: rec.seq,
            });
        }
        engine.apply(&rec.event)?;
        expected += 1;
    }
    Ok(engine)
}
