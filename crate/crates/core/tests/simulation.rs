use proptest::prelude::*;
use zonegate_core::{
    compare_policies, optimize_interval_length, run, BatchLaw, ControlAction, DemandProcessSpec,
    DurationLaw, EntryJitter, Mode, ObjectiveWeights, PhaseKernel, PolicyPatch, PolicyVariant,
    PreferenceLaw, Scenario, TraceKind, TransitLaw, ZonePolicy,
};

const DAY_S: f64 = 86_400.0;

/// Two-phase bursty demand with uniform preference over one day.
fn bursty(p_pay: f64, flex: u64) -> DemandProcessSpec {
    DemandProcessSpec {
        kernel: PhaseKernel {
            transition: vec![vec![0.7, 0.3], vec![0.5, 0.5]],
            sojourn: vec![
                DurationLaw::Exponential { mean: 40.0 },
                DurationLaw::Uniform { lo: 20.0, hi: 100.0 },
            ],
        },
        batch: BatchLaw(vec![vec![0.8, 0.2], vec![0.3, 0.3, 0.4]]),
        initial_phase: 0,
        preference: PreferenceLaw {
            bin_s: 3600.0,
            weights: (0..24).map(|h| 1.0 + f64::from(h % 6)).collect(),
        },
        p_pay,
        flexibility_s: flex,
        control: ControlAction::IDENTITY,
    }
}

fn day_scenario(seed: u64) -> Scenario {
    Scenario {
        demand: bursty(0.4, 1800),
        control: None,
        policy: ZonePolicy {
            capacity: 20,
            rho_free: 0.6,
            rho_hard: 0.9,
            transit: TransitLaw::Exponential { mean: 500.0 },
            ..ZonePolicy::default()
        },
        p_accept_offer: 0.75,
        demand_horizon_s: DAY_S,
        booking_lead_s: DAY_S,
        seed,
    }
}

/// Saturating point-mass demand: one request per minute, no flexibility.
fn dominance_scenario(seed: u64) -> Scenario {
    Scenario {
        demand: DemandProcessSpec {
            kernel: PhaseKernel {
                transition: vec![vec![1.0]],
                sojourn: vec![DurationLaw::PointMass { value: 60.0 }],
            },
            batch: BatchLaw(vec![vec![1.0]]),
            initial_phase: 0,
            preference: PreferenceLaw {
                bin_s: DAY_S,
                weights: vec![1.0],
            },
            p_pay: 0.0,
            flexibility_s: 0,
            control: ControlAction::IDENTITY,
        },
        control: None,
        policy: ZonePolicy {
            capacity: 2,
            slot_length_s: 600,
            rho_free: 0.5,
            rho_hard: 1.0,
            horizon_slots: 144,
            k_alternatives: 3,
            transit: TransitLaw::PointMass { value: 600.0 },
            entry_jitter: EntryJitter::UniformOverSlot,
            ..ZonePolicy::default()
        },
        p_accept_offer: 1.0,
        demand_horizon_s: DAY_S,
        booking_lead_s: DAY_S,
        seed,
    }
}

#[test]
fn conservation_and_accounting_on_a_busy_day() {
    for seed in 0..5 {
        let (m, trace) = run(&day_scenario(seed)).unwrap();
        assert!(m.requests > 1000);
        assert!((m.accounting_total() - 1.0).abs() < 1e-9);
        for f in [m.grant_rate, m.offer_rate, m.paid_share, m.reject_rate] {
            assert!((0.0..=1.0).contains(&f));
        }
        assert_eq!(
            trace.count(TraceKind::Entry),
            trace.exits_within_horizon() + trace.residual()
        );
        assert_eq!(trace.count(TraceKind::Entry), trace.count(TraceKind::Exit));
        assert_eq!(m.throughput as usize, trace.count(TraceKind::Entry));
        // the step function is a running count, so it must never go negative
        let mut n: i64 = 0;
        for e in &trace.events {
            match e.kind {
                TraceKind::Entry => n += 1,
                TraceKind::Exit => n -= 1,
                _ => {}
            }
            assert!(n >= 0);
        }
        assert_eq!(trace.occupancy.last().unwrap().vehicles, 0);
        let times: Vec<f64> = trace.events.iter().map(|e| e.t).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn regulated_point_mass_entry_never_overloads() {
    for seed in 0..10 {
        let mut s = day_scenario(seed);
        s.policy.entry_jitter = EntryJitter::PointMassAtStart;
        s.policy.transit = TransitLaw::PointMass { value: 900.0 };
        let (m, trace) = run(&s).unwrap();
        let cap = s.policy.rho_hard * f64::from(s.policy.capacity);
        assert!(trace.occupancy.iter().all(|o| f64::from(o.vehicles) <= cap + 1e-9));
        assert_eq!(m.overload_probability, 0.0);
        assert!(m.peak_projected_density <= s.policy.rho_hard + 1e-9);
    }
}

#[test]
fn advisory_mode_admits_everything_it_can_see() {
    let mut s = day_scenario(3);
    s.policy.mode = Mode::Advisory;
    let (m, _) = run(&s).unwrap();
    // an empty ledger grants every bookable request on its desired slot
    assert!((m.grant_rate - (1.0 - m.out_of_horizon as f64 / m.requests as f64)).abs() < 1e-12);
}

#[test]
fn higher_threshold_rejects_less_under_saturation() {
    let mut base = dominance_scenario(0);
    base.policy.capacity = 10;
    base.policy.entry_jitter = EntryJitter::PointMassAtStart;
    let variant = |name: &str, rho: f64| PolicyVariant {
        name: name.into(),
        patch: PolicyPatch {
            rho_free: Some(rho),
            ..PolicyPatch::default()
        },
    };
    let table = compare_policies(&base, &[variant("low", 0.5), variant("high", 0.8)], 8).unwrap();
    for (low, high) in table[0].runs.iter().zip(&table[1].runs) {
        assert_eq!(low.requests, high.requests);
        assert!(high.reject_rate < low.reject_rate);
    }
}

#[test]
fn replications_share_demand_streams() {
    let base = day_scenario(40);
    let a = PolicyVariant {
        name: "a".into(),
        patch: PolicyPatch::default(),
    };
    let b = PolicyVariant {
        name: "b".into(),
        patch: PolicyPatch {
            slot_length_s: Some(1800),
            horizon_slots: Some(48),
            ..PolicyPatch::default()
        },
    };
    let table = compare_policies(&base, &[a, b], 3).unwrap();
    for i in 0..3 {
        assert_eq!(table[0].runs[i].requests, table[1].runs[i].requests);
        let s = Scenario {
            seed: 40 + i as u64,
            ..base.clone()
        };
        assert_eq!(table[0].runs[i], run(&s).unwrap().0);
    }
}

#[test]
fn short_slots_dominate_on_the_saturated_corridor() {
    let overload_only = ObjectiveWeights {
        w_overload: 1.0,
        w_offset: 0.0,
        w_reject: 0.0,
        w_throughput: 0.0,
    };
    for seed in 0..5 {
        let s = dominance_scenario(seed);
        let (short, _) = run(&s).unwrap();
        assert_eq!(short.overload_probability, 0.0);
        let mut long = s.clone();
        long.policy.slot_length_s = 1800;
        long.policy.horizon_slots = 48;
        let (long, _) = run(&long).unwrap();
        assert!(long.overload_probability > 0.0);
        assert_eq!(short.throughput, long.throughput);
        for w in [overload_only, ObjectiveWeights::default()] {
            assert_eq!(optimize_interval_length(&s, &[600, 1800], &w).unwrap(), 600);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn runs_are_reproducible(seed in 0u64..1000, lead in 0.0f64..7200.0, p_accept in 0.0f64..=1.0) {
        let mut s = day_scenario(seed);
        s.demand_horizon_s = 7200.0;
        s.booking_lead_s = lead;
        s.p_accept_offer = p_accept;
        let (m1, t1) = run(&s).unwrap();
        let (m2, t2) = run(&s).unwrap();
        prop_assert_eq!(m1, m2);
        prop_assert_eq!(t1.to_jsonl(), t2.to_jsonl());
        prop_assert_eq!(
            t1.count(TraceKind::Entry),
            t1.exits_within_horizon() + t1.residual()
        );
    }
}
