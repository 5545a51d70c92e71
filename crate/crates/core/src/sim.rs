//! Discrete-event simulation of one booking horizon.
//!
//! Requests are processed in epoch order (ties by request id) through the
//! admission pipeline. Granted coupons are then realized: each vehicle draws an
//! entry instant inside its slot and a transit time, and the resulting
//! entry/exit events give the realized occupancy step function.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::admission::{evaluate_request, Outcome};
use crate::demand::{generate_horizon, ControlAction, DemandEvent, DemandProcessSpec};
use crate::error::{Error, Result};
use crate::ledger::{Coupon, CouponState, Ledger, Request};
use crate::zone::{slot_of, EntryJitter, TransitLaw, ZonePolicy, DENSITY_EPS};

/// Everything needed to simulate one policy on one demand stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub demand: DemandProcessSpec,
    /// Overrides the action stored in the demand spec.
    #[serde(default)]
    pub control: Option<ControlAction>,
    pub policy: ZonePolicy,
    /// Probability that a participant takes the first offered alternative.
    #[serde(default = "default_accept")]
    pub p_accept_offer: f64,
    /// Length of the demand stream, seconds.
    pub demand_horizon_s: f64,
    /// Demand epoch `e` is submitted at `e - booking_lead_s` on the slot axis.
    #[serde(default)]
    pub booking_lead_s: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_accept() -> f64 {
    1.0
}

impl Scenario {
    pub fn control(&self) -> ControlAction {
        self.control.unwrap_or(self.demand.control)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::ScenarioInvalid(e.to_string());
        self.demand.validate().map_err(wrap)?;
        self.control().validate().map_err(wrap)?;
        self.policy.validate().map_err(wrap)?;
        if !(0.0..=1.0).contains(&self.p_accept_offer) {
            return Err(Error::ScenarioInvalid(format!(
                "p_accept_offer {} outside [0, 1]",
                self.p_accept_offer
            )));
        }
        if !(self.demand_horizon_s >= 0.0 && self.demand_horizon_s.is_finite()) {
            return Err(Error::ScenarioInvalid("demand_horizon_s must be >= 0".into()));
        }
        if !(self.booking_lead_s >= 0.0 && self.booking_lead_s.is_finite()) {
            return Err(Error::ScenarioInvalid("booking_lead_s must be >= 0".into()));
        }
        Ok(())
    }

    /// The demand stream of this scenario; depends only on demand, control,
    /// horizon and seed, never on the policy.
    pub fn demand_stream(&self) -> Result<Vec<DemandEvent>> {
        generate_horizon(&self.demand, &self.control(), self.demand_horizon_s, self.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    // Declaration order is the tie-break order at equal time stamps.
    Exit,
    Request,
    Decision,
    Accept,
    Decline,
    Entry,
}

/// One line of a trace file: `{"t":..,"kind":..,"ids":[..],"payload":{..}}`.
///
/// `ids` is `[request_id]` for request and decision events and
/// `[request_id, coupon_id]` for accept, entry and exit events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub t: f64,
    pub kind: TraceKind,
    pub ids: Vec<u64>,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyStep {
    pub t: f64,
    pub vehicles: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    /// Right-continuous step function; each step holds until the next one.
    pub occupancy: Vec<OccupancyStep>,
    pub horizon_end_s: f64,
}

impl Trace {
    pub fn count(&self, kind: TraceKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    /// Vehicles still inside the zone at the horizon end.
    pub fn residual(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == TraceKind::Exit && e.t > self.horizon_end_s)
            .count()
    }

    pub fn exits_within_horizon(&self) -> usize {
        self.events
            .iter()
            .filter(|e| e.kind == TraceKind::Exit && e.t <= self.horizon_end_s)
            .count()
    }

    /// JSON lines, one event per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace event serializes"));
            out.push('\n');
        }
        out
    }
}

/// Policy metrics of one run. Rates are fractions of all requests.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub requests: u64,
    /// Free grant on the desired slot.
    pub grant_rate: f64,
    /// Offers whose alternative was taken.
    pub offer_rate: f64,
    pub paid_share: f64,
    /// Rejections, declined offers and requests for past or out-of-horizon slots.
    pub reject_rate: f64,
    pub out_of_horizon: u64,
    pub declined: u64,
    /// Mean |granted slot start − desired slot start| over granted requests.
    pub mean_offset_s: f64,
    /// Fraction of the horizon with realized occupancy above ρ_hard·C.
    pub overload_probability: f64,
    /// Peak realized occupancy over capacity.
    pub peak_density: f64,
    /// Peak projected density of all granted coupons.
    pub peak_projected_density: f64,
    /// Vehicles that entered the zone.
    pub throughput: u64,
    /// Vehicles inside the zone at the horizon end.
    pub residual: u64,
}

/// Names of the values returned by [`Metrics::values`].
pub const METRIC_NAMES: [&str; 12] = [
    "grant_rate",
    "offer_rate",
    "paid_share",
    "reject_rate",
    "mean_offset_s",
    "overload_probability",
    "peak_density",
    "peak_projected_density",
    "throughput",
    "requests",
    "out_of_horizon",
    "declined",
];

impl Metrics {
    pub fn values(&self) -> [f64; METRIC_NAMES.len()] {
        [
            self.grant_rate,
            self.offer_rate,
            self.paid_share,
            self.reject_rate,
            self.mean_offset_s,
            self.overload_probability,
            self.peak_density,
            self.peak_projected_density,
            self.throughput as f64,
            self.requests as f64,
            self.out_of_horizon as f64,
            self.declined as f64,
        ]
    }

    /// `grant + offer + paid + reject`, which must equal 1 when any request arrived.
    pub fn accounting_total(&self) -> f64 {
        self.grant_rate + self.offer_rate + self.paid_share + self.reject_rate
    }
}

/// Entry instant of a granted vehicle inside its slot.
pub fn realize_entry_time<R: Rng + ?Sized>(coupon: &Coupon, policy: &ZonePolicy, rng: &mut R) -> f64 {
    let start = coupon.slot.start_s as f64;
    match policy.entry_jitter {
        EntryJitter::PointMassAtStart => start,
        EntryJitter::UniformOverSlot => {
            let width = (coupon.slot.end_s - coupon.slot.start_s) as f64;
            // keep the draw strictly inside the half-open slot
            (start + width * rng.random::<f64>()).min(coupon.slot.end_s as f64 - 1e-9 * width)
        }
    }
}

fn realize_transit<R: Rng + ?Sized>(law: &TransitLaw, rng: &mut R) -> f64 {
    match *law {
        TransitLaw::PointMass { value } => value,
        TransitLaw::Exponential { mean } => {
            let unit: f64 = Exp1.sample(rng);
            unit * mean
        }
    }
}

/// Time-weighted fraction of `[0, horizon_end)` with occupancy above ρ_hard·C.
pub fn overload_probability(trace: &Trace, policy: &ZonePolicy) -> f64 {
    let end = trace.horizon_end_s;
    if end <= 0.0 {
        return 0.0;
    }
    let cap = policy.occupancy_bound(policy.rho_hard) + DENSITY_EPS;
    let mut over = 0.0;
    for (i, step) in trace.occupancy.iter().enumerate() {
        if step.t >= end {
            break;
        }
        let until = trace
            .occupancy
            .get(i + 1)
            .map_or(end, |next| next.t.min(end));
        if f64::from(step.vehicles) > cap {
            over += until - step.t.max(0.0);
        }
    }
    over / end
}

fn behaviour_seed(seed: u64) -> u64 {
    // splitmix64 finalizer; decorrelates the behaviour stream from the demand seed
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates one scenario. Deterministic in the scenario, seed included.
pub fn run(scenario: &Scenario) -> Result<(Metrics, Trace)> {
    scenario.validate()?;
    let events = scenario.demand_stream()?;
    run_on_stream(scenario, &events)
}

/// Simulates `scenario` on a precomputed demand stream.
pub fn run_on_stream(scenario: &Scenario, events: &[DemandEvent]) -> Result<(Metrics, Trace)> {
    scenario.validate()?;
    let policy = &scenario.policy;
    let mut ledger = Ledger::new(policy.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(behaviour_seed(scenario.seed));
    let mut log: Vec<TraceEvent> = Vec::new();
    let mut granted: Vec<Coupon> = Vec::new();

    let (mut requests, mut grants, mut converted, mut paid, mut rejects) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let (mut out_of_horizon, mut declined) = (0u64, 0u64);
    let mut offset_sum = 0.0;

    for event in events {
        let submitted = event.epoch - scenario.booking_lead_s;
        let mut batch: Vec<_> = event.requests.iter().collect();
        batch.sort_by_key(|r| r.request_id);
        for dr in batch {
            requests += 1;
            let rid = dr.request_id;
            log.push(TraceEvent {
                t: submitted,
                kind: TraceKind::Request,
                ids: vec![rid],
                payload: json!({
                    "desired_time_s": dr.desired_time_s,
                    "flexibility_s": dr.flexibility_s,
                    "willing_to_pay": dr.willing_to_pay,
                }),
            });
            let desired = match slot_of(dr.desired_time_s, policy) {
                Ok(slot) if slot.start_s as f64 > submitted => slot,
                _ => {
                    out_of_horizon += 1;
                    rejects += 1;
                    log.push(TraceEvent {
                        t: submitted,
                        kind: TraceKind::Decision,
                        ids: vec![rid],
                        payload: json!({"decision": "reject", "reason": "OUT_OF_HORIZON"}),
                    });
                    continue;
                }
            };
            let request = Request {
                request_id: rid,
                zone_id: policy.zone_id.clone(),
                desired_slot: desired.index,
                flexibility_s: dr.flexibility_s,
                willing_to_pay: dr.willing_to_pay,
                submitted_at: Some(submitted),
            };
            let decision = evaluate_request(&request, &ledger, submitted)?;
            ledger.record_decision(&decision)?;
            log.push(TraceEvent {
                t: submitted,
                kind: TraceKind::Decision,
                ids: vec![rid],
                payload: serde_json::to_value(&decision.outcome).expect("outcome serializes"),
            });
            match decision.outcome {
                Outcome::Grant { coupon } => {
                    grants += 1;
                    granted.push(coupon);
                }
                Outcome::PaidGrant { coupon } => {
                    paid += 1;
                    granted.push(coupon);
                }
                Outcome::Offer { coupons, .. } => {
                    let first = coupons[0].clone();
                    if rng.random::<f64>() < scenario.p_accept_offer {
                        let coupon = if decision.binding {
                            match ledger.accept_offer(rid, first.slot.index, submitted)?.outcome {
                                Outcome::Grant { coupon } => coupon,
                                _ => unreachable!("accepting an offer yields a grant"),
                            }
                        } else {
                            Coupon {
                                state: CouponState::Active,
                                ..first
                            }
                        };
                        log.push(TraceEvent {
                            t: submitted,
                            kind: TraceKind::Accept,
                            ids: vec![rid, coupon.coupon_id],
                            payload: json!({"slot": coupon.slot.index}),
                        });
                        converted += 1;
                        offset_sum += coupon.slot.start_s.abs_diff(desired.start_s) as f64;
                        granted.push(coupon);
                    } else {
                        if decision.binding {
                            ledger.decline_offer(rid)?;
                        }
                        log.push(TraceEvent {
                            t: submitted,
                            kind: TraceKind::Decline,
                            ids: vec![rid],
                            payload: json!({}),
                        });
                        declined += 1;
                        rejects += 1;
                    }
                }
                Outcome::Reject { .. } => rejects += 1,
            }
        }
    }

    // Realize entries and exits.
    let mut projection = Ledger::new(policy.clone())?;
    let mut moves: Vec<(f64, bool)> = Vec::with_capacity(2 * granted.len());
    for coupon in &granted {
        let entry = realize_entry_time(coupon, policy, &mut rng);
        let exit = entry + realize_transit(&policy.transit, &mut rng);
        let ids = vec![coupon.request_id, coupon.coupon_id];
        log.push(TraceEvent {
            t: entry,
            kind: TraceKind::Entry,
            ids: ids.clone(),
            payload: json!({"slot": coupon.slot.index}),
        });
        log.push(TraceEvent {
            t: exit,
            kind: TraceKind::Exit,
            ids,
            payload: json!({}),
        });
        moves.push((entry, true));
        moves.push((exit, false));
        projection.insert_for_projection(coupon);
    }

    log.sort_by(|a, b| {
        a.t.total_cmp(&b.t)
            .then(a.kind.cmp(&b.kind))
            .then(a.ids.cmp(&b.ids))
    });
    // exits before entries at equal instants: presence is [entry, exit)
    moves.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut occupancy = vec![OccupancyStep { t: 0.0, vehicles: 0 }];
    let mut current: u32 = 0;
    for (t, is_entry) in moves {
        if is_entry {
            current += 1;
        } else {
            current -= 1;
        }
        match occupancy.last_mut() {
            Some(last) if last.t == t => last.vehicles = current,
            _ => occupancy.push(OccupancyStep { t, vehicles: current }),
        }
    }

    let horizon_end_s = policy.horizon_end_s() as f64;
    let trace = Trace {
        events: log,
        occupancy,
        horizon_end_s,
    };

    let capacity = f64::from(policy.capacity);
    let peak_vehicles = trace
        .occupancy
        .iter()
        .map(|s| s.vehicles)
        .max()
        .unwrap_or(0);
    let peak_projected_density = (0..policy.horizon_slots)
        .map(|s| projection.projected_density(s, &[]).unwrap_or(0.0))
        .fold(0.0, f64::max);
    let n_granted = grants + converted + paid;
    let frac = |x: u64| if requests == 0 { 0.0 } else { x as f64 / requests as f64 };
    let metrics = Metrics {
        requests,
        grant_rate: frac(grants),
        offer_rate: frac(converted),
        paid_share: frac(paid),
        reject_rate: frac(rejects),
        out_of_horizon,
        declined,
        mean_offset_s: if n_granted == 0 {
            0.0
        } else {
            offset_sum / n_granted as f64
        },
        overload_probability: overload_probability(&trace, policy),
        peak_density: f64::from(peak_vehicles) / capacity,
        peak_projected_density,
        throughput: granted.len() as u64,
        residual: trace.residual() as u64,
    };
    Ok((metrics, trace))
}

/// Policy fields a variant or an operator update may override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyPatch {
    pub capacity: Option<u32>,
    pub slot_length_s: Option<u64>,
    pub rho_free: Option<f64>,
    pub rho_hard: Option<f64>,
    pub horizon_slots: Option<u32>,
    pub flexibility_default_s: Option<u64>,
    pub k_alternatives: Option<u32>,
    pub transit: Option<TransitLaw>,
    pub entry_jitter: Option<EntryJitter>,
    pub mode: Option<crate::zone::Mode>,
}

impl PolicyPatch {
    pub fn apply(&self, base: &ZonePolicy) -> ZonePolicy {
        let mut p = base.clone();
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { p.$f = v.clone(); } )* };
        }
        set!(
            capacity,
            slot_length_s,
            rho_free,
            rho_hard,
            horizon_slots,
            flexibility_default_s,
            k_alternatives,
            transit,
            entry_jitter,
            mode
        );
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyVariant {
    pub name: String,
    #[serde(flatten)]
    pub patch: PolicyPatch,
}

/// Mean and standard error of every metric over the replications of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub replications: usize,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    /// Raw per-replication metrics, replication order.
    pub runs: Vec<Metrics>,
}

/// Sample mean and standard error of the mean (zero for a single value).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Evaluates each variant on replications `seed, seed+1, ..` of the base
/// scenario. Replication `i` feeds every variant the same demand stream.
pub fn compare_policies(
    base: &Scenario,
    variants: &[PolicyVariant],
    n_replications: usize,
) -> Result<Vec<VariantSummary>> {
    if n_replications == 0 {
        return Err(Error::ScenarioInvalid("n_replications must be >= 1".into()));
    }
    base.validate()?;
    let scenarios: Vec<Scenario> = variants
        .iter()
        .map(|v| {
            let s = Scenario {
                policy: v.patch.apply(&base.policy),
                ..base.clone()
            };
            s.validate().map(|_| s)
        })
        .collect::<Result<_>>()?;
    let streams: Vec<Vec<DemandEvent>> = (0..n_replications)
        .into_par_iter()
        .map(|i| {
            Scenario {
                seed: base.seed + i as u64,
                ..base.clone()
            }
            .demand_stream()
        })
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..scenarios.len())
        .flat_map(|v| (0..n_replications).map(move |i| (v, i)))
        .collect();
    let results: Vec<Metrics> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let s = Scenario {
                seed: base.seed + i as u64,
                ..scenarios[v].clone()
            };
            run_on_stream(&s, &streams[i]).map(|(m, _)| m)
        })
        .collect::<Result<_>>()?;

    Ok(variants
        .iter()
        .enumerate()
        .map(|(v, variant)| {
            let runs: Vec<Metrics> = results[v * n_replications..(v + 1) * n_replications].to_vec();
            let (mean, se) = (0..METRIC_NAMES.len())
                .map(|k| mean_and_se(&runs.iter().map(|m| m.values()[k]).collect::<Vec<_>>()))
                .unzip();
            VariantSummary {
                name: variant.name.clone(),
                replications: n_replications,
                mean,
                se,
                runs,
            }
        })
        .collect())
}
