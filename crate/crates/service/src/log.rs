//! Append-only event log, one JSON record per line.
//!
//! Field order is fixed: `{"seq":..,"ts":..,"kind":..,"payload":{..}}`.
//! `seq` starts at 1 and has no gaps. `ts` is the service clock in seconds.
//!
//! | kind            | payload                                        |
//! |-----------------|------------------------------------------------|
//! | `POLICY_CHANGE` | `{"policy":{..},"offer_ttl_s":300.0}`          |
//! | `REQUEST`       | `{"request":{..}}`                             |
//! | `DECISION`      | `{"decision":{..}}`                            |
//! | `ACCEPT`        | `{"offer_id":7,"slot":3,"decision":{..}}`      |
//! | `DECLINE`       | `{"offer_id":7,"expired":false}`               |

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use zonegate_core::{Decision, Request, ZonePolicy};

use crate::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    PolicyChange {
        policy: ZonePolicy,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offer_ttl_s: Option<f64>,
    },
    Request {
        request: Request,
    },
    Decision {
        decision: Decision,
    },
    Accept {
        offer_id: u64,
        slot: u32,
        decision: Decision,
    },
    Decline {
        offer_id: u64,
        expired: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub ts: f64,
    #[serde(flatten)]
    pub event: Event,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event record serializes")
    }
}

/// Writer side of the log.
#[derive(Debug)]
pub struct EventLog {
    path: PathBuf,
    file: File,
    last_seq: u64,
    fsync: bool,
}

impl EventLog {
    /// Opens `path` for appending, creating it if needed. `last_seq` must be
    /// the sequence number of the last record already in the file.
    pub fn open(path: &Path, last_seq: u64, fsync: bool) -> Result<Self, ServiceError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            path: path.to_path_buf(),
            file,
            last_seq,
            fsync,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    /// Writes the records for `events` and flushes before returning.
    pub fn append(&mut self, ts: f64, events: Vec<Event>) -> Result<Vec<EventRecord>, ServiceError> {
        let mut buf = String::new();
        let mut records = Vec::with_capacity(events.len());
        for (i, event) in events.into_iter().enumerate() {
            let record = EventRecord {
                seq: self.last_seq + 1 + i as u64,
                ts,
                event,
            };
            buf.push_str(&record.to_line());
            buf.push('\n');
            records.push(record);
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        if self.fsync {
            self.file.sync_data()?;
        }
        self.last_seq += records.len() as u64;
        Ok(records)
    }
}

/// Reads and checks a whole log. A missing file reads as empty.
pub fn read_log(path: &Path) -> Result<Vec<EventRecord>, ServiceError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out: Vec<EventRecord> = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let expected = out.len() as u64 + 1;
        let record: EventRecord = serde_json::from_str(&line).map_err(|e| ServiceError::CorruptLog {
            seq: expected,
            message: format!("unparseable record: {e}"),
        })?;
        if record.seq != expected {
            return Err(ServiceError::CorruptLog {
                seq: expected,
                message: format!("found seq {}", record.seq),
            });
        }
        out.push(record);
    }
    Ok(out)
}
