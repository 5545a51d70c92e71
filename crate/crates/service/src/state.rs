//! Zone state as a fold over the event log.
//!
//! The live service and replay both mutate state only through
//! [`ZoneState::apply`], which is what makes replay reproduce the live ledger
//! byte for byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use zonegate_core::{evaluate_request, Ledger, Outcome, ZonePolicy};

use crate::log::{read_log, Event, EventRecord};
use crate::ServiceError;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub requests: u64,
    pub grants: u64,
    pub offers: u64,
    pub paid_grants: u64,
    pub rejects: u64,
    pub accepts: u64,
    pub declines: u64,
    pub expired: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneState {
    /// Sequence number of the last applied record.
    pub seq: u64,
    pub next_request_id: u64,
    pub counters: Counters,
    pub ledger: Ledger,
}

impl Default for ZoneState {
    fn default() -> Self {
        ZoneState {
            seq: 0,
            next_request_id: 1,
            counters: Counters::default(),
            ledger: Ledger::new(ZonePolicy::default()).expect("default policy is valid"),
        }
    }
}

/// Written next to the log every few records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub seq: u64,
    pub state: ZoneState,
}

impl ZoneState {
    /// Applies one record. Fails if the record does not follow the state.
    pub fn apply(&mut self, record: &EventRecord) -> Result<(), String> {
        if record.seq != self.seq + 1 {
            return Err(format!("expected seq {}, found {}", self.seq + 1, record.seq));
        }
        match &record.event {
            Event::PolicyChange { policy, offer_ttl_s } => {
                if self.seq == 0 {
                    let ttl = offer_ttl_s.unwrap_or(self.ledger.offer_ttl_s());
                    self.ledger = Ledger::new(policy.clone())
                        .map_err(|e| e.to_string())?
                        .with_offer_ttl(ttl);
                } else {
                    self.ledger.set_policy(policy.clone()).map_err(|e| e.to_string())?;
                }
            }
            Event::Request { request } => {
                self.counters.requests += 1;
                self.next_request_id = self.next_request_id.max(request.request_id + 1);
            }
            Event::Decision { decision } => {
                self.ledger.record_decision(decision).map_err(|e| e.to_string())?;
                let c = &mut self.counters;
                match decision.outcome {
                    Outcome::Grant { .. } => c.grants += 1,
                    Outcome::Offer { .. } => c.offers += 1,
                    Outcome::PaidGrant { .. } => c.paid_grants += 1,
                    Outcome::Reject { .. } => c.rejects += 1,
                }
            }
            Event::Accept {
                offer_id,
                slot,
                decision,
            } => {
                let replayed = self
                    .ledger
                    .accept_offer(*offer_id, *slot, record.ts)
                    .map_err(|e| e.to_string())?;
                if &replayed != decision {
                    return Err(format!("accept of offer {offer_id} yields a different grant"));
                }
                self.counters.accepts += 1;
            }
            Event::Decline { offer_id, expired } => {
                if *expired {
                    self.ledger.expire_offer(*offer_id).map_err(|e| e.to_string())?;
                    self.counters.expired += 1;
                } else {
                    self.ledger.decline_offer(*offer_id).map_err(|e| e.to_string())?;
                    self.counters.declines += 1;
                }
            }
        }
        self.seq = record.seq;
        Ok(())
    }

    /// Deterministic serialization of the whole state.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }
}

/// Folds `records` into a fresh state.
pub fn replay(records: &[EventRecord]) -> Result<ZoneState, ServiceError> {
    replay_from(ZoneState::default(), records)
}

/// Applies every record after `state.seq`.
pub fn replay_from(mut state: ZoneState, records: &[EventRecord]) -> Result<ZoneState, ServiceError> {
    let start = state.seq;
    for record in records.iter().filter(|r| r.seq > start) {
        state.apply(record).map_err(|message| ServiceError::CorruptLog {
            seq: record.seq,
            message,
        })?;
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub records: u64,
    pub decisions_checked: u64,
    pub snapshot_seq: Option<u64>,
    pub ledger_version: u64,
}

/// Replays `records` from scratch and re-derives every decision: each
/// `DECISION` must equal a fresh evaluation of the preceding `REQUEST` at its
/// recorded time, and the replayed state must match `snapshot` at its seq.
pub fn verify(records: &[EventRecord], snapshot: Option<&Snapshot>) -> Result<(ZoneState, VerifyReport), ServiceError> {
    let mut state = ZoneState::default();
    let mut checked = 0;
    let mut pending = None;
    for record in records {
        if let Some(snap) = snapshot {
            if state.seq == snap.seq && state.canonical_json() != snap.state.canonical_json() {
                return Err(ServiceError::CorruptLog {
                    seq: snap.seq,
                    message: "snapshot differs from replayed state".into(),
                });
            }
        }
        match &record.event {
            Event::Request { request } => {
                let fresh = evaluate_request(request, &state.ledger, record.ts).map_err(|e| {
                    ServiceError::CorruptLog {
                        seq: record.seq,
                        message: format!("request does not evaluate: {e}"),
                    }
                })?;
                pending = Some(fresh);
            }
            Event::Decision { decision } => {
                let fresh = pending.take().ok_or_else(|| ServiceError::CorruptLog {
                    seq: record.seq,
                    message: "decision without request".into(),
                })?;
                if &fresh != decision {
                    return Err(ServiceError::CorruptLog {
                        seq: record.seq,
                        message: "recorded decision differs from re-evaluation".into(),
                    });
                }
                checked += 1;
            }
            _ => {}
        }
        state.apply(record).map_err(|message| ServiceError::CorruptLog {
            seq: record.seq,
            message,
        })?;
    }
    if let Some(snap) = snapshot {
        if snap.seq > state.seq {
            return Err(ServiceError::CorruptLog {
                seq: state.seq + 1,
                message: format!("snapshot at seq {} is past the end of the log", snap.seq),
            });
        }
        if snap.seq == state.seq && state.canonical_json() != snap.state.canonical_json() {
            return Err(ServiceError::CorruptLog {
                seq: snap.seq,
                message: "snapshot differs from replayed state".into(),
            });
        }
    }
    let report = VerifyReport {
        records: records.len() as u64,
        decisions_checked: checked,
        snapshot_seq: snapshot.map(|s| s.seq),
        ledger_version: state.ledger.version(),
    };
    Ok((state, report))
}

pub fn read_snapshot(path: &Path) -> Result<Option<Snapshot>, ServiceError> {
    match std::fs::read_to_string(path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Writes via a temporary file and rename, so a crash never leaves a torn snapshot.
pub fn write_snapshot(path: &Path, state: &ZoneState) -> Result<(), ServiceError> {
    let snapshot = Snapshot {
        seq: state.seq,
        state: state.clone(),
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, serde_json::to_vec(&snapshot).expect("snapshot serializes"))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Recovers state from a log, starting from the snapshot when it is usable.
pub fn recover(log_path: &Path, snapshot_path: &Path) -> Result<(ZoneState, Vec<EventRecord>), ServiceError> {
    let records = read_log(log_path)?;
    let start = match read_snapshot(snapshot_path)? {
        Some(s) if s.seq <= records.len() as u64 => s.state,
        _ => ZoneState::default(),
    };
    let state = replay_from(start, &records)?;
    Ok((state, records))
}
