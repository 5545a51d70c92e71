//! Zone policy and the slot grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when comparing projected occupancy against a density bound.
pub const DENSITY_EPS: f64 = 1e-9;

/// Time a vehicle spends inside the zone after entry, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum TransitLaw {
    PointMass { value: f64 },
    Exponential { mean: f64 },
}

impl TransitLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            TransitLaw::PointMass { value } => value,
            TransitLaw::Exponential { mean } => mean,
        }
    }
}

/// Law of the realized entry instant inside a granted slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryJitter {
    PointMassAtStart,
    UniformOverSlot,
}

/// Whether issued coupons bind the participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Regulated,
    Advisory,
}

/// Parameters of one controlled zone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZonePolicy {
    #[serde(default = "default_zone_id")]
    pub zone_id: String,
    /// Maximum number of vehicles in the zone at once.
    pub capacity: u32,
    pub slot_length_s: u64,
    /// Projected density up to which free coupons are issued.
    pub rho_free: f64,
    /// Density that free and paid coupons together may never exceed.
    pub rho_hard: f64,
    pub horizon_slots: u32,
    #[serde(default)]
    pub flexibility_default_s: u64,
    pub k_alternatives: u32,
    pub transit: TransitLaw,
    #[serde(default = "default_jitter")]
    pub entry_jitter: EntryJitter,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_zone_id() -> String {
    "A1".to_string()
}

fn default_jitter() -> EntryJitter {
    EntryJitter::UniformOverSlot
}

fn default_mode() -> Mode {
    Mode::Regulated
}

impl Default for ZonePolicy {
    fn default() -> Self {
        ZonePolicy {
            zone_id: default_zone_id(),
            capacity: 100,
            slot_length_s: 600,
            rho_free: 0.8,
            rho_hard: 1.0,
            horizon_slots: 144,
            flexibility_default_s: 1800,
            k_alternatives: 3,
            transit: TransitLaw::PointMass { value: 600.0 },
            entry_jitter: default_jitter(),
            mode: default_mode(),
        }
    }
}

impl ZonePolicy {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        if self.capacity == 0 {
            return bad("capacity must be >= 1".into());
        }
        if self.slot_length_s == 0 {
            return bad("slot_length_s must be > 0".into());
        }
        if self.horizon_slots == 0 {
            return bad("horizon_slots must be >= 1".into());
        }
        if self.k_alternatives == 0 {
            return bad("k_alternatives must be >= 1".into());
        }
        if !(self.rho_free > 0.0 && self.rho_free <= self.rho_hard && self.rho_hard <= 1.0) {
            return bad(format!(
                "need 0 < rho_free <= rho_hard <= 1, got rho_free={} rho_hard={}",
                self.rho_free, self.rho_hard
            ));
        }
        let transit_ok = match self.transit {
            TransitLaw::PointMass { value } => value >= 0.0 && value.is_finite(),
            TransitLaw::Exponential { mean } => mean > 0.0 && mean.is_finite(),
        };
        if !transit_ok {
            return bad("transit law parameter out of range".into());
        }
        Ok(())
    }

    pub fn horizon_end_s(&self) -> u64 {
        u64::from(self.horizon_slots) * self.slot_length_s
    }

    pub fn slot(&self, index: u32) -> TimeSlot {
        let start_s = u64::from(index) * self.slot_length_s;
        TimeSlot {
            index,
            start_s,
            end_s: start_s + self.slot_length_s,
        }
    }

    /// Number of later slots whose evaluation grid a coupon can reach.
    pub(crate) fn reach_slots(&self) -> u32 {
        let span = match self.transit {
            TransitLaw::PointMass { value } => value,
            // e^-40 of a vehicle is below f64 resolution of any count.
            TransitLaw::Exponential { mean } => 40.0 * mean,
        };
        let slots = (span / self.slot_length_s as f64).ceil();
        slots.min(f64::from(self.horizon_slots)) as u32
    }

    /// Absolute occupancy bound corresponding to density `rho`.
    pub fn occupancy_bound(&self, rho: f64) -> f64 {
        rho * f64::from(self.capacity)
    }
}

/// Half-open interval `[start_s, end_s)` of the booking horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TimeSlot {
    pub index: u32,
    pub start_s: u64,
    pub end_s: u64,
}

/// Slot containing `time_s`.
pub fn slot_of(time_s: f64, policy: &ZonePolicy) -> Result<TimeSlot> {
    let end = policy.horizon_end_s() as f64;
    if !(time_s >= 0.0 && time_s < end) {
        return Err(Error::OutOfHorizon(format!(
            "time {time_s} s outside [0, {end})"
        )));
    }
    let index = (time_s / policy.slot_length_s as f64).floor() as u32;
    // Guard against rounding right below a boundary.
    let index = index.min(policy.horizon_slots - 1);
    Ok(policy.slot(index))
}
