use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("rejected demand spec: {0}")]
    RejectSpec(String),

    #[error("rejected control action: {0}")]
    RejectAction(String),

    #[error("stationary solve did not converge after {iterations} refinement steps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("invalid zone policy: {0}")]
    InvalidPolicy(String),

    #[error("policy change refused: {0}")]
    PolicyLocked(String),

    #[error("time or slot outside the booking horizon: {0}")]
    OutOfHorizon(String),

    #[error("unknown zone `{0}`")]
    UnknownZone(String),

    #[error("decision evaluated against ledger version {evaluated}, ledger is at {current}")]
    StaleDecision { evaluated: u64, current: u64 },

    #[error("illegal coupon transition {from:?} -> {to:?} for coupon {coupon_id}")]
    IllegalTransition {
        coupon_id: u64,
        from: crate::ledger::CouponState,
        to: crate::ledger::CouponState,
    },

    #[error("unknown coupon {0}")]
    UnknownCoupon(u64),

    #[error("unknown offer {0}")]
    UnknownOffer(u64),

    #[error("offer {0} has expired")]
    OfferExpired(u64),

    #[error("offer {0} is already resolved")]
    OfferResolved(u64),

    #[error("slot {slot} is not part of offer {offer_id}")]
    NotInOffer { offer_id: u64, slot: u32 },

    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),

    #[error("invalid search space: {0}")]
    SpaceInvalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
