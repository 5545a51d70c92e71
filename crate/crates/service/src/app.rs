//! Request handling behind the HTTP layer.
//!
//! All mutations run under the write lock: sweep expired offers, evaluate,
//! append the records to the log, then apply them to the in-memory state.
//! Nothing is returned to a caller before its records are in the log.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::http::StatusCode;
use serde::{Deserialize, Serialize};
use zonegate_core::{
    evaluate_request, feasible_free, slot_of, Decision, Error as CoreError, Ledger, Mode,
    OfferStatus, Outcome, PolicyPatch, Request, TimeSlot, ZonePolicy,
};

use crate::config::ServiceConfig;
use crate::log::{Event, EventLog, EventRecord};
use crate::state::{recover, write_snapshot, Counters, ZoneState};
use crate::{Clock, ServiceError};

/// Error returned to HTTP clients as `{"error": code, "message": ..}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            code: "MALFORMED",
            message: message.into(),
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "INTERNAL",
            message: message.into(),
        }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let (status, code) = match &e {
            CoreError::UnknownZone(_) => (StatusCode::NOT_FOUND, "UNKNOWN_ZONE"),
            CoreError::UnknownOffer(_) | CoreError::UnknownCoupon(_) => (StatusCode::NOT_FOUND, "UNKNOWN_OFFER"),
            CoreError::OfferExpired(_) => (StatusCode::GONE, "OFFER_EXPIRED"),
            CoreError::OfferResolved(_) => (StatusCode::CONFLICT, "OFFER_RESOLVED"),
            CoreError::PolicyLocked(_) => (StatusCode::CONFLICT, "POLICY_LOCKED"),
            CoreError::StaleDecision { .. } => (StatusCode::CONFLICT, "WRITE_CONFLICT"),
            CoreError::InvalidPolicy(_) => (StatusCode::BAD_REQUEST, "INVALID_POLICY"),
            CoreError::OutOfHorizon(_) => (StatusCode::BAD_REQUEST, "OUT_OF_HORIZON"),
            CoreError::NotInOffer { .. } => (StatusCode::BAD_REQUEST, "NOT_IN_OFFER"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        ApiError {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::internal(e.to_string())
    }
}

/// Body of `POST /zones/{z}/requests`. Exactly one of `desired_slot` and
/// `desired_time_s` (seconds from the start of slot 0) must be present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    #[serde(default)]
    pub zone_id: Option<String>,
    #[serde(default)]
    pub desired_slot: Option<u32>,
    #[serde(default)]
    pub desired_time_s: Option<f64>,
    /// Defaults to the zone's `flexibility_default_s`.
    #[serde(default)]
    pub flexibility_s: Option<u64>,
    #[serde(default)]
    pub willing_to_pay: bool,
}

/// Response to a submission or an accepted offer.
///
/// The outcome is flattened: `"decision"` is one of `grant`, `offer`,
/// `paid_grant`, `reject`, with `coupon`, `coupons` + `expires_at`, or
/// `reason` alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDecision {
    pub request_id: u64,
    pub zone_id: String,
    #[serde(flatten)]
    pub outcome: Outcome,
    pub binding: bool,
    pub evaluated_against: u64,
    /// Sequence number of the last record written for this response.
    pub seq: u64,
}

/// Body of `POST /offers/{id}/accept`; without a slot the first alternative is taken.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcceptBody {
    #[serde(default)]
    pub slot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclineResponse {
    pub offer_id: u64,
    pub status: OfferStatus,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotView {
    pub index: u32,
    pub start_s: u64,
    pub end_s: u64,
    pub projected_density: f64,
    pub free_held: u32,
    pub paid_held: u32,
    /// A flexibility-0 request for this slot would get a free grant.
    pub feasible: bool,
    pub bunker_remaining: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Availability {
    pub zone_id: String,
    pub seq: u64,
    pub ledger_version: u64,
    pub policy: ZonePolicy,
    pub slots: Vec<SlotView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneMetrics {
    pub zone_id: String,
    pub mode: Mode,
    pub seq: u64,
    pub ledger_version: u64,
    #[serde(flatten)]
    pub counters: Counters,
    pub open_offers: u64,
    pub held_coupons: u64,
    pub peak_projected_density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAck {
    pub seq: u64,
    pub policy: ZonePolicy,
}

struct Inner {
    state: ZoneState,
    log: EventLog,
}

pub struct App {
    inner: RwLock<Inner>,
    clock: Arc<dyn Clock>,
    horizon_start_unix_s: Option<f64>,
    snapshot_every: u64,
    snapshot_path: PathBuf,
}

impl App {
    /// Recovers from the configured log, or starts a new one whose first
    /// record is the configured policy.
    pub fn open(config: &ServiceConfig, clock: Arc<dyn Clock>) -> Result<Arc<App>, ServiceError> {
        config.validate()?;
        let policy = config.load_policy()?;
        Self::open_with_policy(config, policy, clock)
    }

    pub fn open_with_policy(
        config: &ServiceConfig,
        policy: ZonePolicy,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<App>, ServiceError> {
        let snapshot_path = config.snapshot_path();
        let (state, _) = recover(&config.log_path, &snapshot_path)?;
        let log = EventLog::open(&config.log_path, state.seq, config.fsync)?;
        let app = App {
            inner: RwLock::new(Inner { state, log }),
            clock,
            horizon_start_unix_s: config.horizon_start_unix_s,
            snapshot_every: config.snapshot_every,
            snapshot_path,
        };
        {
            let mut inner = app.inner.write().expect("state lock");
            if inner.state.seq == 0 {
                let now = app.clock.now();
                app.commit(
                    &mut inner,
                    now,
                    vec![Event::PolicyChange {
                        policy,
                        offer_ttl_s: Some(config.offer_ttl_s),
                    }],
                )?;
            } else if inner.state.ledger.policy() != &policy {
                tracing::warn!("policy file differs from the recovered policy; keeping the recovered one");
            }
        }
        Ok(Arc::new(app))
    }

    /// Canonical JSON of the full state, for comparison with a replay.
    pub fn state_json(&self) -> String {
        self.inner.read().expect("state lock").state.canonical_json()
    }

    pub fn ledger(&self) -> Ledger {
        self.inner.read().expect("state lock").state.ledger.clone()
    }

    pub fn seq(&self) -> u64 {
        self.inner.read().expect("state lock").state.seq
    }

    fn commit(&self, inner: &mut Inner, ts: f64, events: Vec<Event>) -> Result<Vec<EventRecord>, ServiceError> {
        if events.is_empty() {
            return Ok(Vec::new());
        }
        let before = inner.state.seq;
        let records = inner.log.append(ts, events)?;
        for record in &records {
            inner
                .state
                .apply(record)
                .map_err(|message| ServiceError::CorruptLog {
                    seq: record.seq,
                    message,
                })?;
        }
        if self.snapshot_every > 0 && inner.state.seq / self.snapshot_every > before / self.snapshot_every {
            write_snapshot(&self.snapshot_path, &inner.state)?;
        }
        Ok(records)
    }

    fn sweep(&self, inner: &mut Inner, now: f64) -> Result<(), ServiceError> {
        let expired: Vec<Event> = inner
            .state
            .ledger
            .offers()
            .filter(|o| o.status == OfferStatus::Open && now >= o.expires_at)
            .map(|o| Event::Decline {
                offer_id: o.request_id,
                expired: true,
            })
            .collect();
        self.commit(inner, now, expired)?;
        Ok(())
    }

    fn check_zone(&self, ledger: &Ledger, zone: &str) -> Result<(), ApiError> {
        if ledger.policy().zone_id != zone {
            return Err(CoreError::UnknownZone(zone.to_string()).into());
        }
        Ok(())
    }

    fn submitted_at(&self, now: f64) -> Option<f64> {
        self.horizon_start_unix_s.map(|h| now - h)
    }

    pub fn submit(&self, zone: &str, wire: &WireRequest) -> Result<WireDecision, ApiError> {
        let mut inner = self.inner.write().expect("state lock");
        self.check_zone(&inner.state.ledger, zone)?;
        if let Some(z) = &wire.zone_id {
            if z != zone {
                return Err(ApiError::bad_request(format!("body zone `{z}` differs from path zone `{zone}`")));
            }
        }
        let policy = inner.state.ledger.policy().clone();
        let desired: TimeSlot = match (wire.desired_slot, wire.desired_time_s) {
            (Some(s), None) => inner.state.ledger.slot(s)?,
            (None, Some(t)) => slot_of(t, &policy)?,
            _ => {
                return Err(ApiError::bad_request(
                    "exactly one of desired_slot and desired_time_s is required",
                ))
            }
        };
        let now = self.clock.now();
        self.sweep(&mut inner, now)?;
        let request = Request {
            request_id: inner.state.next_request_id,
            zone_id: zone.to_string(),
            desired_slot: desired.index,
            flexibility_s: wire.flexibility_s.unwrap_or(policy.flexibility_default_s),
            willing_to_pay: wire.willing_to_pay,
            submitted_at: self.submitted_at(now),
        };
        let decision = evaluate_request(&request, &inner.state.ledger, now)?;
        let records = self.commit(
            &mut inner,
            now,
            vec![
                Event::Request { request },
                Event::Decision {
                    decision: decision.clone(),
                },
            ],
        )?;
        Ok(wire_decision(zone, decision, records.last().map_or(0, |r| r.seq)))
    }

    pub fn accept(&self, offer_id: u64, body: &AcceptBody) -> Result<WireDecision, ApiError> {
        let mut inner = self.inner.write().expect("state lock");
        let now = self.clock.now();
        self.sweep(&mut inner, now)?;
        let ledger = &inner.state.ledger;
        let offer = ledger.offer(offer_id).ok_or(CoreError::UnknownOffer(offer_id))?;
        match offer.status {
            OfferStatus::Open => {}
            OfferStatus::Expired => return Err(CoreError::OfferExpired(offer_id).into()),
            _ => return Err(CoreError::OfferResolved(offer_id).into()),
        }
        let slot = match body.slot {
            Some(s) => s,
            None => {
                let first = offer.coupon_ids[0];
                ledger.coupon(first).ok_or(CoreError::UnknownCoupon(first))?.slot.index
            }
        };
        let decision = ledger.clone().accept_offer(offer_id, slot, now)?;
        let zone = ledger.policy().zone_id.clone();
        let records = self.commit(
            &mut inner,
            now,
            vec![Event::Accept {
                offer_id,
                slot,
                decision: decision.clone(),
            }],
        )?;
        Ok(wire_decision(&zone, decision, records.last().map_or(0, |r| r.seq)))
    }

    pub fn decline(&self, offer_id: u64) -> Result<DeclineResponse, ApiError> {
        let mut inner = self.inner.write().expect("state lock");
        let now = self.clock.now();
        self.sweep(&mut inner, now)?;
        let offer = inner
            .state
            .ledger
            .offer(offer_id)
            .ok_or(CoreError::UnknownOffer(offer_id))?;
        match offer.status {
            OfferStatus::Open => {}
            OfferStatus::Expired => return Err(CoreError::OfferExpired(offer_id).into()),
            _ => return Err(CoreError::OfferResolved(offer_id).into()),
        }
        let records = self.commit(
            &mut inner,
            now,
            vec![Event::Decline {
                offer_id,
                expired: false,
            }],
        )?;
        Ok(DeclineResponse {
            offer_id,
            status: OfferStatus::Declined,
            seq: records.last().map_or(0, |r| r.seq),
        })
    }

    pub fn update_policy(&self, zone: &str, patch: &PolicyPatch) -> Result<PolicyAck, ApiError> {
        let mut inner = self.inner.write().expect("state lock");
        self.check_zone(&inner.state.ledger, zone)?;
        let policy = patch.apply(inner.state.ledger.policy());
        policy.validate()?;
        inner.state.ledger.clone().set_policy(policy.clone())?;
        let now = self.clock.now();
        let records = self.commit(
            &mut inner,
            now,
            vec![Event::PolicyChange {
                policy: policy.clone(),
                offer_ttl_s: None,
            }],
        )?;
        Ok(PolicyAck {
            seq: records.last().map_or(0, |r| r.seq),
            policy,
        })
    }

    pub fn availability(&self, zone: &str) -> Result<Availability, ApiError> {
        let inner = self.inner.read().expect("state lock");
        let ledger = &inner.state.ledger;
        self.check_zone(ledger, zone)?;
        let policy = ledger.policy();
        let submitted_at = self.submitted_at(self.clock.now());
        let slots = (0..policy.horizon_slots)
            .map(|s| {
                let slot = policy.slot(s);
                let probe = Request {
                    request_id: 0,
                    zone_id: policy.zone_id.clone(),
                    desired_slot: s,
                    flexibility_s: 0,
                    willing_to_pay: false,
                    submitted_at,
                };
                let (free_held, paid_held) = ledger.counts(s);
                Ok(SlotView {
                    index: s,
                    start_s: slot.start_s,
                    end_s: slot.end_s,
                    projected_density: ledger.projected_density(s, &[])?,
                    free_held,
                    paid_held,
                    feasible: feasible_free(s, ledger, &probe),
                    bunker_remaining: ledger.bunker_remaining(s),
                })
            })
            .collect::<Result<Vec<_>, CoreError>>()?;
        Ok(Availability {
            zone_id: policy.zone_id.clone(),
            seq: inner.state.seq,
            ledger_version: ledger.version(),
            policy: policy.clone(),
            slots,
        })
    }

    pub fn metrics(&self, zone: &str) -> Result<ZoneMetrics, ApiError> {
        let inner = self.inner.read().expect("state lock");
        let ledger = &inner.state.ledger;
        self.check_zone(ledger, zone)?;
        let policy = ledger.policy();
        let peak = (0..policy.horizon_slots)
            .map(|s| ledger.projected_density(s, &[]))
            .collect::<Result<Vec<_>, CoreError>>()?
            .into_iter()
            .fold(0.0, f64::max);
        Ok(ZoneMetrics {
            zone_id: policy.zone_id.clone(),
            mode: policy.mode,
            seq: inner.state.seq,
            ledger_version: ledger.version(),
            counters: inner.state.counters.clone(),
            open_offers: ledger.offers().filter(|o| o.status == OfferStatus::Open).count() as u64,
            held_coupons: ledger.coupons().filter(|c| c.state.holds_capacity()).count() as u64,
            peak_projected_density: peak,
        })
    }
}

fn wire_decision(zone: &str, decision: Decision, seq: u64) -> WireDecision {
    WireDecision {
        request_id: decision.request_id,
        zone_id: zone.to_string(),
        outcome: decision.outcome,
        binding: decision.binding,
        evaluated_against: decision.evaluated_against,
        seq,
    }
}
