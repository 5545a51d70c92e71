//! Admission pipeline: free grant under the density threshold, else the
//! nearest feasible alternative slots, else a paid coupon from the bunker,
//! else reject.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ledger::{Coupon, CouponKind, CouponState, Ledger, Request};
use crate::zone::{Mode, TimeSlot, ZonePolicy, DENSITY_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectReason {
    /// No free slot in the window and the zone keeps no paid reserve.
    FreeAndAlternativesExhausted,
    /// The paid reserve of the desired slot is used up, or a paid entry would
    /// push the projection over the hard cap.
    BunkerExhausted,
    UnwillingToPay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Outcome {
    Grant { coupon: Coupon },
    /// Alternatives ordered by distance from the desired start, all reserved
    /// together; the set fits under ρ* as a whole.
    Offer { coupons: Vec<Coupon>, expires_at: f64 },
    PaidGrant { coupon: Coupon },
    Reject { reason: RejectReason },
}

/// Result of evaluating one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub request_id: u64,
    pub outcome: Outcome,
    /// Ledger version the decision was computed against.
    pub evaluated_against: u64,
    /// False in advisory mode: nothing is reserved.
    pub binding: bool,
}

impl Decision {
    pub fn offered_slots(&self) -> Vec<TimeSlot> {
        match &self.outcome {
            Outcome::Offer { coupons, .. } => coupons.iter().map(|c| c.slot).collect(),
            _ => Vec::new(),
        }
    }
}

/// Paid capacity per slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BunkerPlan {
    pub per_slot: Vec<u32>,
}

/// `floor((ρ_hard − ρ*) · C)` paid coupons per slot.
///
/// With point-mass entry at slot start every coupon adds exactly one unit to
/// its slot's peak, so `floor(ρ*·C)` free plus this many paid coupons stay
/// within `ρ_hard·C`; entry jitter only spreads the same mass.
pub fn size_bunker(policy: &ZonePolicy) -> BunkerPlan {
    let c = f64::from(policy.capacity);
    let slack = policy.rho_hard * c - policy.rho_free * c;
    let per = (slack + DENSITY_EPS).floor().max(0.0) as u32;
    BunkerPlan {
        per_slot: vec![per; policy.horizon_slots as usize],
    }
}

fn fits(ledger: &Ledger, slot: u32, rho: f64) -> bool {
    fits_with(ledger, &[slot], rho)
}

/// Every slot affected by the last of `extra` stays within `rho` with all of
/// `extra` added.
fn fits_with(ledger: &Ledger, extra: &[u32], rho: f64) -> bool {
    let bound = ledger.policy().occupancy_bound(rho) + DENSITY_EPS;
    let capacity = f64::from(ledger.policy().capacity);
    let slot = *extra.last().expect("at least one slot");
    ledger.affected_slots(slot).all(|s| {
        ledger
            .projected_density(s, extra)
            .map(|d| d * capacity <= bound)
            .unwrap_or(false)
    })
}

fn bookable(ledger: &Ledger, slot: u32, request: &Request) -> bool {
    if slot >= ledger.policy().horizon_slots {
        return false;
    }
    match request.submitted_at {
        Some(t) => (ledger.policy().slot(slot).start_s as f64) > t,
        None => true,
    }
}

/// True iff one more coupon in `slot` keeps every affected slot at or below ρ*.
pub fn feasible_free(slot: u32, ledger: &Ledger, request: &Request) -> bool {
    bookable(ledger, slot, request) && fits(ledger, slot, ledger.policy().rho_free)
}

/// True iff a paid coupon in `slot` is within the bunker and keeps every
/// affected slot at or below ρ_hard.
pub fn feasible_paid(slot: u32, ledger: &Ledger, request: &Request) -> bool {
    bookable(ledger, slot, request)
        && ledger.bunker_remaining(slot) > 0
        && fits(ledger, slot, ledger.policy().rho_hard)
}

/// Feasible slots inside the request's window, nearest start first, earlier
/// slot first on ties, at most `k_alternatives` of them. The desired slot is
/// never included.
pub fn find_alternative_slots(request: &Request, ledger: &Ledger) -> Vec<TimeSlot> {
    let policy = ledger.policy();
    let k = policy.k_alternatives as usize;
    let reach = (request.flexibility_s / policy.slot_length_s) as i64;
    let desired = i64::from(request.desired_slot);
    let mut out = Vec::with_capacity(k);
    for dist in 1..=reach {
        for cand in [desired - dist, desired + dist] {
            if cand < 0 || cand >= i64::from(policy.horizon_slots) {
                continue;
            }
            let cand = cand as u32;
            if feasible_free(cand, ledger, request) {
                out.push(policy.slot(cand));
                if out.len() == k {
                    return out;
                }
            }
        }
    }
    out
}

/// Keeps the alternatives that can be held at the same time: each one must
/// still fit under ρ* with the earlier kept ones already reserved.
fn jointly_reservable(alternatives: Vec<TimeSlot>, ledger: &Ledger) -> Vec<TimeSlot> {
    let rho = ledger.policy().rho_free;
    let mut kept: Vec<u32> = Vec::with_capacity(alternatives.len());
    let mut out = Vec::with_capacity(alternatives.len());
    for slot in alternatives {
        kept.push(slot.index);
        if fits_with(ledger, &kept, rho) {
            out.push(slot);
        } else {
            kept.pop();
        }
    }
    out
}

/// Runs the pipeline for `request` against the current ledger state.
///
/// `now` stamps the expiry of any offer. The ledger is not modified; apply the
/// result with [`Ledger::record_decision`].
pub fn evaluate_request(request: &Request, ledger: &Ledger, now: f64) -> Result<Decision> {
    let policy = ledger.policy();
    if request.zone_id != policy.zone_id {
        return Err(Error::UnknownZone(request.zone_id.clone()));
    }
    let desired = ledger.slot(request.desired_slot)?;
    if let Some(t) = request.submitted_at {
        if desired.start_s as f64 <= t {
            return Err(Error::OutOfHorizon(format!(
                "slot {} starts at {} s, not after submission at {t} s",
                desired.index, desired.start_s
            )));
        }
    }
    let binding = policy.mode == Mode::Regulated;
    let next_id = ledger.next_coupon_id();
    let coupon = |id: u64, slot: TimeSlot, kind, state| Coupon {
        coupon_id: id,
        request_id: request.request_id,
        slot,
        kind,
        state,
    };

    let outcome = if feasible_free(desired.index, ledger, request) {
        Outcome::Grant {
            coupon: coupon(next_id, desired, CouponKind::Free, CouponState::Active),
        }
    } else {
        let alternatives = jointly_reservable(find_alternative_slots(request, ledger), ledger);
        if !alternatives.is_empty() {
            Outcome::Offer {
                coupons: alternatives
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| coupon(next_id + i as u64, s, CouponKind::Free, CouponState::Offered))
                    .collect(),
                expires_at: now + ledger.offer_ttl_s(),
            }
        } else if !request.willing_to_pay {
            Outcome::Reject {
                reason: RejectReason::UnwillingToPay,
            }
        } else if feasible_paid(desired.index, ledger, request) {
            Outcome::PaidGrant {
                coupon: coupon(next_id, desired, CouponKind::Paid, CouponState::Active),
            }
        } else if ledger.bunker_plan().per_slot[desired.index as usize] == 0 {
            Outcome::Reject {
                reason: RejectReason::FreeAndAlternativesExhausted,
            }
        } else {
            Outcome::Reject {
                reason: RejectReason::BunkerExhausted,
            }
        }
    };
    Ok(Decision {
        request_id: request.request_id,
        outcome,
        evaluated_against: ledger.version(),
        binding,
    })
}

/// Accepts one slot of an open offer: it becomes an ACTIVE grant and the
/// sibling reservations are released.
pub fn accept_offer(ledger: &mut Ledger, offer_id: u64, chosen_slot: u32, now: f64) -> Result<Decision> {
    ledger.accept_offer(offer_id, chosen_slot, now)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zone::{EntryJitter, TransitLaw};

    fn policy(capacity: u32, rho_free: f64, rho_hard: f64) -> ZonePolicy {
        ZonePolicy {
            capacity,
            slot_length_s: 600,
            rho_free,
            rho_hard,
            horizon_slots: 12,
            k_alternatives: 2,
            transit: TransitLaw::PointMass { value: 600.0 },
            entry_jitter: EntryJitter::PointMassAtStart,
            ..ZonePolicy::default()
        }
    }

    fn request(id: u64, slot: u32, flex: u64, pay: bool) -> Request {
        Request {
            request_id: id,
            zone_id: "A1".into(),
            desired_slot: slot,
            flexibility_s: flex,
            willing_to_pay: pay,
            submitted_at: None,
        }
    }

    fn book(ledger: &mut Ledger, r: &Request) -> Decision {
        let d = evaluate_request(r, ledger, 0.0).unwrap();
        ledger.record_decision(&d).unwrap();
        d
    }

    fn fill(ledger: &mut Ledger, slot: u32, n: u32, base_id: u64) {
        for i in 0..n {
            let d = book(ledger, &request(base_id + u64::from(i), slot, 0, false));
            assert!(matches!(d.outcome, Outcome::Grant { .. }));
        }
    }

    #[test]
    fn bunker_examples() {
        assert_eq!(size_bunker(&policy(100, 0.8, 1.0)).per_slot[0], 20);
        assert_eq!(size_bunker(&policy(100, 0.8, 0.8)).per_slot[0], 0);
        assert_eq!(size_bunker(&policy(50, 0.7, 0.9)).per_slot[0], 10);
    }

    #[test]
    fn feasibility_threshold_boundary() {
        let mut l = Ledger::new(policy(10, 0.8, 1.0)).unwrap();
        let r = request(100, 5, 0, false);
        assert!(feasible_free(5, &l, &r));
        fill(&mut l, 5, 8, 0);
        assert!(!feasible_free(5, &l, &r));
        assert!(feasible_free(6, &l, &r));
    }

    #[test]
    fn spill_over_is_checked_on_next_slot() {
        let mut p = policy(10, 0.5, 1.0);
        p.transit = TransitLaw::PointMass { value: 900.0 };
        let mut l = Ledger::new(p).unwrap();
        // slot 6 full; slot 5 empty but its vehicles would spill into slot 6
        fill(&mut l, 6, 5, 0);
        assert!(!feasible_free(5, &l, &request(50, 5, 0, false)));
        assert!(feasible_free(4, &l, &request(51, 4, 0, false)));
    }

    #[test]
    fn offered_alternatives_fit_together() {
        let mut p = policy(1, 1.0, 1.0);
        p.transit = TransitLaw::PointMass { value: 1200.0 };
        p.k_alternatives = 3;
        let mut l = Ledger::new(p).unwrap();
        fill(&mut l, 5, 1, 0);
        let r = request(9, 5, 1800, false);
        let alts: Vec<u32> = find_alternative_slots(&r, &l).iter().map(|s| s.index).collect();
        assert_eq!(alts, vec![3, 7, 2]);
        // slots 2 and 3 overlap in time, so only one of them can be held
        let d = book(&mut l, &r);
        let offered: Vec<u32> = d.offered_slots().iter().map(|s| s.index).collect();
        assert_eq!(offered, vec![3, 7]);
        for s in 0..12 {
            assert!(l.projected_density(s, &[]).unwrap() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn alternatives_nearest_first_earlier_on_ties() {
        let mut l = Ledger::new(policy(10, 0.5, 1.0)).unwrap();
        fill(&mut l, 5, 5, 0);
        let alts = find_alternative_slots(&request(99, 5, 1800, false), &l);
        assert_eq!(alts.iter().map(|s| s.index).collect::<Vec<_>>(), vec![4, 6]);
        fill(&mut l, 4, 5, 10);
        let alts = find_alternative_slots(&request(99, 5, 1800, false), &l);
        assert_eq!(alts.iter().map(|s| s.index).collect::<Vec<_>>(), vec![6, 3]);
        assert!(find_alternative_slots(&request(99, 5, 0, false), &l).is_empty());
    }

    #[test]
    fn no_feasible_slot_in_window() {
        let mut l = Ledger::new(policy(2, 0.5, 1.0)).unwrap();
        for s in 4..=6 {
            fill(&mut l, s, 1, u64::from(s) * 10);
        }
        assert!(find_alternative_slots(&request(1, 5, 600, false), &l).is_empty());
    }

    #[test]
    fn pipeline_order() {
        let mut l = Ledger::new(policy(10, 0.8, 1.0)).unwrap();
        let d = book(&mut l, &request(1, 5, 600, true));
        assert!(matches!(d.outcome, Outcome::Grant { .. }));

        fill(&mut l, 5, 7, 100);
        let d = book(&mut l, &request(2, 5, 600, true));
        assert_eq!(d.offered_slots().iter().map(|s| s.index).collect::<Vec<_>>(), vec![4, 6]);

        // slots 4 and 6 each hold one reservation from the open offer
        fill(&mut l, 4, 7, 200);
        fill(&mut l, 6, 7, 300);
        let d = evaluate_request(&request(3, 5, 600, true), &l, 0.0).unwrap();
        assert!(matches!(d.outcome, Outcome::PaidGrant { ref coupon } if coupon.kind == CouponKind::Paid));

        let d = evaluate_request(&request(4, 5, 600, false), &l, 0.0).unwrap();
        assert_eq!(d.outcome, Outcome::Reject { reason: RejectReason::UnwillingToPay });
    }

    #[test]
    fn bunker_exhaustion() {
        let mut l = Ledger::new(policy(10, 0.8, 1.0)).unwrap();
        fill(&mut l, 5, 8, 0);
        for i in 0..2 {
            let d = book(&mut l, &request(50 + i, 5, 0, true));
            assert!(matches!(d.outcome, Outcome::PaidGrant { .. }));
        }
        assert_eq!(l.bunker_remaining(5), 0);
        let d = evaluate_request(&request(60, 5, 0, true), &l, 0.0).unwrap();
        assert_eq!(d.outcome, Outcome::Reject { reason: RejectReason::BunkerExhausted });

        let mut tight = Ledger::new(policy(10, 0.8, 0.8)).unwrap();
        fill(&mut tight, 5, 8, 0);
        let d = evaluate_request(&request(61, 5, 0, true), &tight, 0.0).unwrap();
        assert_eq!(
            d.outcome,
            Outcome::Reject { reason: RejectReason::FreeAndAlternativesExhausted }
        );
    }

    #[test]
    fn offer_acceptance() {
        let mut l = Ledger::new(policy(2, 0.5, 1.0)).unwrap();
        fill(&mut l, 5, 1, 0);
        let d = book(&mut l, &request(9, 5, 600, false));
        assert_eq!(d.offered_slots().len(), 2);
        let g = accept_offer(&mut l, 9, 4, 1.0).unwrap();
        assert!(matches!(g.outcome, Outcome::Grant { ref coupon } if coupon.slot.index == 4));
        assert_eq!(l.held_in_slot(6), 0);
        assert!(matches!(accept_offer(&mut l, 9, 6, 1.0), Err(Error::OfferResolved(9))));
    }

    #[test]
    fn advisory_mode_is_non_binding() {
        let mut p = policy(10, 0.8, 1.0);
        p.mode = Mode::Advisory;
        let mut l = Ledger::new(p).unwrap();
        let d = book(&mut l, &request(1, 5, 0, false));
        assert!(!d.binding);
        assert!(matches!(d.outcome, Outcome::Grant { .. }));
        assert_eq!(l.held_in_slot(5), 0);
    }

    #[test]
    fn request_errors() {
        let l = Ledger::new(policy(10, 0.8, 1.0)).unwrap();
        let mut r = request(1, 5, 0, false);
        r.zone_id = "B7".into();
        assert!(matches!(evaluate_request(&r, &l, 0.0), Err(Error::UnknownZone(_))));
        assert!(matches!(
            evaluate_request(&request(1, 12, 0, false), &l, 0.0),
            Err(Error::OutOfHorizon(_))
        ));
        let mut late = request(1, 1, 0, false);
        late.submitted_at = Some(600.0);
        assert!(matches!(evaluate_request(&late, &l, 0.0), Err(Error::OutOfHorizon(_))));
    }

    #[test]
    fn past_slots_are_not_offered() {
        let mut l = Ledger::new(policy(2, 0.5, 1.0)).unwrap();
        fill(&mut l, 1, 1, 0);
        let mut r = request(5, 1, 1200, false);
        r.submitted_at = Some(100.0);
        let alts = find_alternative_slots(&r, &l);
        assert_eq!(alts.iter().map(|s| s.index).collect::<Vec<_>>(), vec![2, 3]);
    }
}
