//! Authoritative registry of coupons and the occupancy projection built on it.
//!
//! Per-slot counts cover every coupon that holds capacity: OFFERED (reserved
//! until answered), ACTIVE and CONSUMED. The projection only depends on a
//! coupon's slot and on the zone laws, so it is evaluated from those counts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::admission::{size_bunker, BunkerPlan, Decision, Outcome};
use crate::error::{Error, Result};
use crate::zone::{EntryJitter, TimeSlot, TransitLaw, ZonePolicy};

/// Points per slot in the evaluation grid (step Δ/10, both ends included).
pub const GRID_POINTS: usize = 11;

/// Default lifetime of an unanswered offer, seconds.
pub const DEFAULT_OFFER_TTL_S: f64 = 300.0;

/// An application for entry into a zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub zone_id: String,
    pub desired_slot: u32,
    /// Half-width of the acceptable window around the desired slot start.
    pub flexibility_s: u64,
    pub willing_to_pay: bool,
    /// Submission instant on the horizon axis; slots starting at or before it
    /// cannot be booked. `None` disables the check.
    #[serde(default)]
    pub submitted_at: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CouponKind {
    Free,
    Paid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CouponState {
    Offered,
    Active,
    Declined,
    Consumed,
}

impl CouponState {
    /// Whether a coupon in this state occupies capacity.
    pub fn holds_capacity(self) -> bool {
        !matches!(self, CouponState::Declined)
    }
}

/// Electronic permission to enter the zone during one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupon {
    pub coupon_id: u64,
    pub request_id: u64,
    pub slot: TimeSlot,
    pub kind: CouponKind,
    pub state: CouponState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OfferStatus {
    Open,
    Accepted,
    Declined,
    Expired,
}

/// Alternatives reserved for one request, keyed by the request id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Offer {
    pub request_id: u64,
    pub coupon_ids: Vec<u64>,
    pub expires_at: f64,
    pub status: OfferStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ledger {
    policy: ZonePolicy,
    version: u64,
    next_coupon_id: u64,
    offer_ttl_s: f64,
    coupons: BTreeMap<u64, Coupon>,
    offers: BTreeMap<u64, Offer>,
    free_counts: Vec<u32>,
    paid_counts: Vec<u32>,
    bunker: BunkerPlan,
    #[serde(skip)]
    kernel: PresenceKernel,
}

/// `presence` of a slot `d` slots back, at each grid point; built on first use.
#[derive(Clone, Default)]
struct PresenceKernel(std::sync::OnceLock<Vec<[f64; GRID_POINTS]>>);

impl PartialEq for PresenceKernel {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl std::fmt::Debug for PresenceKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("PresenceKernel")
    }
}

impl Ledger {
    pub fn new(policy: ZonePolicy) -> Result<Self> {
        policy.validate()?;
        let n = policy.horizon_slots as usize;
        let bunker = size_bunker(&policy);
        Ok(Ledger {
            policy,
            version: 0,
            next_coupon_id: 1,
            offer_ttl_s: DEFAULT_OFFER_TTL_S,
            coupons: BTreeMap::new(),
            offers: BTreeMap::new(),
            free_counts: vec![0; n],
            paid_counts: vec![0; n],
            bunker,
            kernel: PresenceKernel::default(),
        })
    }

    pub fn with_offer_ttl(mut self, ttl_s: f64) -> Self {
        self.offer_ttl_s = ttl_s;
        self
    }

    pub fn policy(&self) -> &ZonePolicy {
        &self.policy
    }

    /// Monotone stamp bumped by every state change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn offer_ttl_s(&self) -> f64 {
        self.offer_ttl_s
    }

    pub(crate) fn next_coupon_id(&self) -> u64 {
        self.next_coupon_id
    }

    pub fn coupons(&self) -> impl Iterator<Item = &Coupon> {
        self.coupons.values()
    }

    pub fn coupon(&self, coupon_id: u64) -> Option<&Coupon> {
        self.coupons.get(&coupon_id)
    }

    pub fn offer(&self, offer_id: u64) -> Option<&Offer> {
        self.offers.get(&offer_id)
    }

    pub fn offers(&self) -> impl Iterator<Item = &Offer> {
        self.offers.values()
    }

    pub fn bunker_plan(&self) -> &BunkerPlan {
        &self.bunker
    }

    /// (FREE, PAID) coupons holding capacity in `slot`.
    pub fn counts(&self, slot: u32) -> (u32, u32) {
        let i = slot as usize;
        (self.free_counts[i], self.paid_counts[i])
    }

    pub fn held_in_slot(&self, slot: u32) -> u32 {
        let (f, p) = self.counts(slot);
        f + p
    }

    /// Paid capacity left in `slot`; never negative.
    pub fn bunker_remaining(&self, slot: u32) -> u32 {
        self.bunker
            .per_slot
            .get(slot as usize)
            .copied()
            .unwrap_or(0)
            .saturating_sub(self.paid_counts[slot as usize])
    }

    pub fn slot(&self, index: u32) -> Result<TimeSlot> {
        if index < self.policy.horizon_slots {
            Ok(self.policy.slot(index))
        } else {
            Err(Error::OutOfHorizon(format!(
                "slot {index} outside horizon of {} slots",
                self.policy.horizon_slots
            )))
        }
    }

    /// Grid instants of `slot`. The last point is evaluated as a left limit.
    pub fn grid(&self, slot: u32) -> [f64; GRID_POINTS] {
        let start = (u64::from(slot) * self.policy.slot_length_s) as f64;
        let step = self.policy.slot_length_s as f64 / (GRID_POINTS - 1) as f64;
        std::array::from_fn(|i| start + step * i as f64)
    }

    /// Expected number of vehicles in the zone at each grid point of `slot`,
    /// counting every capacity-holding coupon plus the hypothetical `extra`
    /// coupons (given by their slot indices).
    pub fn occupancy_profile(&self, slot: u32, extra: &[u32]) -> Result<[f64; GRID_POINTS]> {
        self.slot(slot)?;
        let kernel = self.kernel();
        let first = slot.saturating_sub(self.policy.reach_slots());
        let mut profile = [0.0; GRID_POINTS];
        for j in first..=slot {
            let n = self.held_in_slot(j) + extra.iter().filter(|&&e| e == j).count() as u32;
            if n == 0 {
                continue;
            }
            let row = &kernel[(slot - j) as usize];
            for (p, k) in profile.iter_mut().zip(row) {
                *p += f64::from(n) * k;
            }
        }
        Ok(profile)
    }

    fn kernel(&self) -> &[[f64; GRID_POINTS]] {
        self.kernel.0.get_or_init(|| {
            let step = self.policy.slot_length_s as f64 / (GRID_POINTS - 1) as f64;
            (0..=self.policy.reach_slots())
                .map(|d| {
                    let base = (u64::from(d) * self.policy.slot_length_s) as f64;
                    std::array::from_fn(|i| {
                        presence(&self.policy, 0.0, base + step * i as f64, i == GRID_POINTS - 1)
                    })
                })
                .collect()
        })
    }

    /// Peak of [`Ledger::occupancy_profile`] divided by capacity.
    pub fn projected_density(&self, slot: u32, extra: &[u32]) -> Result<f64> {
        let profile = self.occupancy_profile(slot, extra)?;
        let peak = profile.iter().copied().fold(0.0, f64::max);
        Ok(peak / f64::from(self.policy.capacity))
    }

    /// Slots whose grid a coupon in `slot` can touch, `slot` included.
    pub fn affected_slots(&self, slot: u32) -> std::ops::RangeInclusive<u32> {
        let last = slot
            .saturating_add(self.policy.reach_slots())
            .min(self.policy.horizon_slots - 1);
        slot..=last
    }

    /// Applies an admission decision produced against this ledger.
    ///
    /// Non-binding (advisory) decisions leave the ledger untouched; so do rejects.
    pub fn record_decision(&mut self, decision: &Decision) -> Result<()> {
        if !decision.binding || matches!(decision.outcome, Outcome::Reject { .. }) {
            return Ok(());
        }
        if decision.evaluated_against != self.version {
            return Err(Error::StaleDecision {
                evaluated: decision.evaluated_against,
                current: self.version,
            });
        }
        let coupons: Vec<&Coupon> = match &decision.outcome {
            Outcome::Grant { coupon } | Outcome::PaidGrant { coupon } => vec![coupon],
            Outcome::Offer { coupons, .. } => coupons.iter().collect(),
            Outcome::Reject { .. } => unreachable!(),
        };
        for c in &coupons {
            if self.coupons.contains_key(&c.coupon_id) || c.slot.index >= self.policy.horizon_slots {
                return Err(Error::StaleDecision {
                    evaluated: decision.evaluated_against,
                    current: self.version,
                });
            }
        }
        for c in coupons {
            self.add_held(c.slot.index, c.kind);
            self.next_coupon_id = self.next_coupon_id.max(c.coupon_id + 1);
            self.coupons.insert(c.coupon_id, c.clone());
        }
        if let Outcome::Offer { coupons, expires_at } = &decision.outcome {
            self.offers.insert(
                decision.request_id,
                Offer {
                    request_id: decision.request_id,
                    coupon_ids: coupons.iter().map(|c| c.coupon_id).collect(),
                    expires_at: *expires_at,
                    status: OfferStatus::Open,
                },
            );
        }
        self.version += 1;
        Ok(())
    }

    /// Moves one coupon through its state machine.
    pub fn coupon_transition(&mut self, coupon_id: u64, to: CouponState) -> Result<()> {
        let coupon = self
            .coupons
            .get(&coupon_id)
            .ok_or(Error::UnknownCoupon(coupon_id))?;
        let from = coupon.state;
        let legal = matches!(
            (from, to),
            (CouponState::Offered, CouponState::Active)
                | (CouponState::Offered, CouponState::Declined)
                | (CouponState::Active, CouponState::Consumed)
        );
        let second_active = to == CouponState::Active
            && self
                .coupons
                .values()
                .any(|c| c.request_id == coupon.request_id && c.state == CouponState::Active);
        if !legal || second_active {
            return Err(Error::IllegalTransition { coupon_id, from, to });
        }
        let (slot, kind) = (coupon.slot.index, coupon.kind);
        if to == CouponState::Declined {
            self.remove_held(slot, kind);
        }
        self.coupons.get_mut(&coupon_id).expect("checked above").state = to;
        self.version += 1;
        Ok(())
    }

    /// Activates the offered coupon in `slot` and releases its siblings.
    pub fn accept_offer(&mut self, offer_id: u64, slot: u32, now: f64) -> Result<Decision> {
        let offer = self.open_offer(offer_id, now)?;
        let chosen = offer
            .coupon_ids
            .iter()
            .copied()
            .find(|id| self.coupons[id].slot.index == slot)
            .ok_or(Error::NotInOffer { offer_id, slot })?;
        let evaluated_against = self.version;
        let siblings: Vec<u64> = offer
            .coupon_ids
            .iter()
            .copied()
            .filter(|id| *id != chosen)
            .collect();
        self.coupon_transition(chosen, CouponState::Active)?;
        for id in siblings {
            self.coupon_transition(id, CouponState::Declined)?;
        }
        self.offers.get_mut(&offer_id).expect("open offer").status = OfferStatus::Accepted;
        Ok(Decision {
            request_id: offer_id,
            outcome: Outcome::Grant {
                coupon: self.coupons[&chosen].clone(),
            },
            evaluated_against,
            binding: true,
        })
    }

    /// Releases every reservation of an open offer.
    pub fn decline_offer(&mut self, offer_id: u64) -> Result<()> {
        self.open_offer(offer_id, f64::NEG_INFINITY)?;
        self.release_offer(offer_id, OfferStatus::Declined)
    }

    /// Releases open offers whose TTL has elapsed at `now`; returns their ids.
    pub fn expire_offers(&mut self, now: f64) -> Vec<u64> {
        let due: Vec<u64> = self
            .offers
            .values()
            .filter(|o| o.status == OfferStatus::Open && now >= o.expires_at)
            .map(|o| o.request_id)
            .collect();
        for id in &due {
            self.release_offer(*id, OfferStatus::Expired)
                .expect("due offers are open");
        }
        due
    }

    /// Marks one offer expired, releasing it. Used when replaying a log.
    pub fn expire_offer(&mut self, offer_id: u64) -> Result<()> {
        self.open_offer(offer_id, f64::NEG_INFINITY)?;
        self.release_offer(offer_id, OfferStatus::Expired)
    }

    fn open_offer(&self, offer_id: u64, now: f64) -> Result<&Offer> {
        let offer = self.offers.get(&offer_id).ok_or(Error::UnknownOffer(offer_id))?;
        match offer.status {
            OfferStatus::Open if now >= offer.expires_at => Err(Error::OfferExpired(offer_id)),
            OfferStatus::Open => Ok(offer),
            OfferStatus::Expired => Err(Error::OfferExpired(offer_id)),
            OfferStatus::Accepted | OfferStatus::Declined => Err(Error::OfferResolved(offer_id)),
        }
    }

    fn release_offer(&mut self, offer_id: u64, status: OfferStatus) -> Result<()> {
        let ids = self.offers[&offer_id].coupon_ids.clone();
        for id in ids {
            if self.coupons[&id].state == CouponState::Offered {
                self.coupon_transition(id, CouponState::Declined)?;
            }
        }
        self.offers.get_mut(&offer_id).expect("exists").status = status;
        self.version += 1;
        Ok(())
    }

    /// Replaces the policy. Slot length and horizon are frozen while any
    /// coupon holds capacity.
    pub fn set_policy(&mut self, policy: ZonePolicy) -> Result<()> {
        policy.validate()?;
        let grid_changed = policy.slot_length_s != self.policy.slot_length_s
            || policy.horizon_slots != self.policy.horizon_slots;
        if grid_changed && self.coupons.values().any(|c| c.state.holds_capacity()) {
            return Err(Error::PolicyLocked(
                "slot length and horizon cannot change while coupons are held".into(),
            ));
        }
        let n = policy.horizon_slots as usize;
        self.free_counts.resize(n, 0);
        self.paid_counts.resize(n, 0);
        self.bunker = size_bunker(&policy);
        self.policy = policy;
        self.kernel = PresenceKernel::default();
        self.version += 1;
        Ok(())
    }

    /// Recount of capacity-holding coupons by slot and kind.
    pub fn recount(&self) -> (Vec<u32>, Vec<u32>) {
        let n = self.policy.horizon_slots as usize;
        let (mut free, mut paid) = (vec![0; n], vec![0; n]);
        for c in self.coupons.values().filter(|c| c.state.holds_capacity()) {
            match c.kind {
                CouponKind::Free => free[c.slot.index as usize] += 1,
                CouponKind::Paid => paid[c.slot.index as usize] += 1,
            }
        }
        (free, paid)
    }

    /// Checks the count and bunker invariants against a full recount.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let (free, paid) = self.recount();
        if free != self.free_counts || paid != self.paid_counts {
            return Err("per-slot counts disagree with recount".into());
        }
        for s in 0..self.policy.horizon_slots {
            let planned = self.bunker.per_slot[s as usize];
            let remaining = self.bunker_remaining(s);
            if paid[s as usize] <= planned && remaining != planned - paid[s as usize] {
                return Err(format!("bunker remaining wrong in slot {s}"));
            }
        }
        Ok(())
    }

    /// Deterministic serialization used to compare ledgers byte for byte.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("ledger serializes")
    }

    /// Counts a coupon in its slot without any admission bookkeeping.
    pub(crate) fn insert_for_projection(&mut self, coupon: &Coupon) {
        self.add_held(coupon.slot.index, coupon.kind);
    }

    fn add_held(&mut self, slot: u32, kind: CouponKind) {
        match kind {
            CouponKind::Free => self.free_counts[slot as usize] += 1,
            CouponKind::Paid => self.paid_counts[slot as usize] += 1,
        }
    }

    fn remove_held(&mut self, slot: u32, kind: CouponKind) {
        match kind {
            CouponKind::Free => self.free_counts[slot as usize] -= 1,
            CouponKind::Paid => self.paid_counts[slot as usize] -= 1,
        }
    }
}

/// Probability that a vehicle booked into the slot starting at `slot_start`
/// is inside the zone at `t` (or just before `t` when `left_limit`).
pub fn presence(policy: &ZonePolicy, slot_start: f64, t: f64, left_limit: bool) -> f64 {
    let width = policy.slot_length_s as f64;
    let a = slot_start;
    match (policy.entry_jitter, policy.transit) {
        (EntryJitter::PointMassAtStart, TransitLaw::PointMass { value: d }) => {
            let inside = if left_limit {
                a < t && t <= a + d
            } else {
                a <= t && t < a + d
            };
            if inside {
                1.0
            } else {
                0.0
            }
        }
        (EntryJitter::PointMassAtStart, TransitLaw::Exponential { mean }) => {
            let entered = if left_limit { t > a } else { t >= a };
            if entered {
                (-(t - a) / mean).exp()
            } else {
                0.0
            }
        }
        (EntryJitter::UniformOverSlot, TransitLaw::PointMass { value: d }) => {
            // P(t - d < entry <= t), entry ~ U[a, a + width)
            let overlap = t.min(a + width) - (t - d).max(a);
            overlap.max(0.0) / width
        }
        (EntryJitter::UniformOverSlot, TransitLaw::Exponential { mean }) => {
            if t <= a {
                return 0.0;
            }
            let u = t.min(a + width);
            mean / width * ((-(t - u) / mean).exp() - (-(t - a) / mean).exp())
        }
    }
}
