//! Pre-registration access control for a road zone.
//!
//! Entry requests come from a controlled batch semi-Markov arrival flow
//! ([`demand`]). Each request is checked against a projection of expected zone
//! occupancy ([`ledger`]) and receives a free coupon, a list of nearby
//! alternative slots, a paid coupon from a per-slot reserve, or a rejection
//! ([`admission`]). The [`sim`] module replays whole booking days with random
//! entry instants and transit times, and [`optimize`] searches slot length,
//! threshold and reserve size over simulated replications.

pub mod admission;
pub mod demand;
pub mod error;
pub mod ledger;
pub mod optimize;
pub mod sim;
pub mod zone;

pub use admission::{
    accept_offer, evaluate_request, feasible_free, feasible_paid, find_alternative_slots,
    size_bunker, BunkerPlan, Decision, Outcome, RejectReason,
};
pub use demand::{
    apply_control, generate_horizon, mean_arrival_rate, next_event, stationary_phase_distribution,
    validate_spec, BatchLaw, ControlAction, DemandEvent, DemandProcessSpec, DemandRequest,
    DurationLaw, GeneratorState, PhaseKernel, PreferenceLaw,
};
pub use error::{Error, Result};
pub use ledger::{Coupon, CouponKind, CouponState, Ledger, Offer, OfferStatus, Request, GRID_POINTS};
pub use optimize::{
    argmin, grid_search, objective, optimize_interval_length, search_with, Combination,
    ExhaustiveGrid, GridRow, ObjectiveWeights, SearchResult, SearchSpace, Searcher,
};
pub use sim::{
    compare_policies, overload_probability, realize_entry_time, run, run_on_stream, Metrics,
    OccupancyStep, PolicyPatch, PolicyVariant, Scenario, Trace, TraceEvent, TraceKind,
    VariantSummary, METRIC_NAMES,
};
pub use zone::{slot_of, EntryJitter, Mode, TimeSlot, TransitLaw, ZonePolicy};
