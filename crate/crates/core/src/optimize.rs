//! Search over slot length, free threshold and bunker slack.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::DemandEvent;
use crate::error::{Error, Result};
use crate::sim::{mean_and_se, run_on_stream, Metrics, Scenario, METRIC_NAMES};

/// Weights of the scalar policy objective. Lower objective is better.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub w_overload: f64,
    pub w_offset: f64,
    pub w_reject: f64,
    /// Subtracted: served vehicles per request.
    pub w_throughput: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            w_overload: 1.0,
            w_offset: 0.25,
            w_reject: 1.0,
            w_throughput: 0.5,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_overload, self.w_offset, self.w_reject, self.w_throughput];
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::SpaceInvalid("weights must be finite and >= 0".into()));
        }
        if w.iter().all(|x| *x == 0.0) {
            return Err(Error::SpaceInvalid("at least one weight must be nonzero".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ObjectiveWeights {
            w_overload: self.w_overload * factor,
            w_offset: self.w_offset * factor,
            w_reject: self.w_reject * factor,
            w_throughput: self.w_throughput * factor,
        }
    }
}

/// Weighted objective of one run; the offset term is measured in slots.
pub fn objective(metrics: &Metrics, weights: &ObjectiveWeights, slot_length_s: u64) -> Result<f64> {
    weights.validate()?;
    let served = if metrics.requests == 0 {
        0.0
    } else {
        metrics.throughput as f64 / metrics.requests as f64
    };
    Ok(weights.w_overload * metrics.overload_probability
        + weights.w_offset * (metrics.mean_offset_s / slot_length_s as f64)
        + weights.w_reject * metrics.reject_rate
        - weights.w_throughput * served)
}

/// One point of the search grid. `rho_hard = rho_free + slack`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Combination {
    pub delta_s: u64,
    pub rho_free: f64,
    pub slack: f64,
}

/// Candidate lists and the scenario they are applied to.
///
/// The base policy's horizon length in seconds is kept fixed; each Δ gets
/// `ceil(total / Δ)` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub delta_s: Vec<u64>,
    pub rho_free: Vec<f64>,
    pub slack: Vec<f64>,
    pub replications: usize,
    pub scenario: Scenario,
}

impl SearchSpace {
    /// Every combination in enumeration order (Δ outermost, slack innermost).
    pub fn combinations(&self) -> Vec<Combination> {
        let mut out = Vec::new();
        for &delta_s in &self.delta_s {
            for &rho_free in &self.rho_free {
                for &slack in &self.slack {
                    out.push(Combination {
                        delta_s,
                        rho_free,
                        slack,
                    });
                }
            }
        }
        out
    }

    /// Scenario with the base policy rewritten for `c`.
    pub fn scenario_for(&self, c: &Combination) -> Result<Scenario> {
        let base = &self.scenario.policy;
        if c.delta_s == 0 {
            return Err(Error::SpaceInvalid("delta_s must be > 0".into()));
        }
        let mut rho_hard = c.rho_free + c.slack;
        if (rho_hard - 1.0).abs() <= 1e-9 {
            rho_hard = 1.0;
        }
        let total = base.horizon_end_s();
        let mut scenario = self.scenario.clone();
        scenario.policy.slot_length_s = c.delta_s;
        scenario.policy.horizon_slots = u32::try_from(total.div_ceil(c.delta_s))
            .map_err(|_| Error::SpaceInvalid(format!("too many slots for delta_s {}", c.delta_s)))?;
        scenario.policy.rho_free = c.rho_free;
        scenario.policy.rho_hard = rho_hard;
        if c.slack < 0.0 {
            return Err(Error::SpaceInvalid(format!("negative slack {}", c.slack)));
        }
        scenario
            .validate()
            .map_err(|e| Error::SpaceInvalid(format!("{c:?}: {e}")))?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta_s.is_empty() || self.rho_free.is_empty() || self.slack.is_empty() {
            return Err(Error::SpaceInvalid("candidate lists must be nonempty".into()));
        }
        if self.replications == 0 {
            return Err(Error::SpaceInvalid("replications must be >= 1".into()));
        }
        for c in self.combinations() {
            self.scenario_for(&c)?;
        }
        Ok(())
    }
}

/// Result of evaluating one combination over all replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub combination: Combination,
    pub mean_objective: f64,
    /// Standard error of the mean objective.
    pub se: f64,
    /// Per-metric means, in [`METRIC_NAMES`] order.
    pub metric_means: Vec<f64>,
    /// Objective of each replication.
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Combination,
    pub best_objective: f64,
    /// Rows in evaluation order.
    pub table: Vec<GridRow>,
}

/// Proposes combinations to evaluate. Each call sees every row evaluated so
/// far; returning `None` ends the search.
pub trait Searcher {
    fn propose(&mut self, space: &SearchSpace, evaluated: &[GridRow]) -> Option<Vec<Combination>>;
}

/// Evaluates the full Cartesian grid in one batch.
#[derive(Debug, Default)]
pub struct ExhaustiveGrid {
    done: bool,
}

impl Searcher for ExhaustiveGrid {
    fn propose(&mut self, space: &SearchSpace, _evaluated: &[GridRow]) -> Option<Vec<Combination>> {
        if self.done {
            return None;
        }
        self.done = true;
        Some(space.combinations())
    }
}

/// True when row `a` should be preferred over row `b`.
fn better(a: &GridRow, b: &GridRow) -> bool {
    let scale = 1f64.max(a.mean_objective.abs()).max(b.mean_objective.abs());
    if (a.mean_objective - b.mean_objective).abs() > 1e-12 * scale {
        return a.mean_objective < b.mean_objective;
    }
    let (ca, cb) = (&a.combination, &b.combination);
    if ca.delta_s != cb.delta_s {
        return ca.delta_s < cb.delta_s;
    }
    if ca.rho_free != cb.rho_free {
        return ca.rho_free > cb.rho_free;
    }
    false
}

/// Index of the preferred row: least mean objective, then smaller Δ, then
/// larger ρ*, then earliest row.
pub fn argmin(table: &[GridRow]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, row) in table.iter().enumerate() {
        if best.is_none_or(|b| better(row, &table[b])) {
            best = Some(i);
        }
    }
    best
}

fn evaluate(
    space: &SearchSpace,
    weights: &ObjectiveWeights,
    streams: &[Vec<DemandEvent>],
    combos: &[Combination],
) -> Result<Vec<GridRow>> {
    let scenarios: Vec<Scenario> = combos
        .iter()
        .map(|c| space.scenario_for(c))
        .collect::<Result<_>>()?;
    let reps = streams.len();
    let jobs: Vec<(usize, usize)> = (0..combos.len())
        .flat_map(|c| (0..reps).map(move |i| (c, i)))
        .collect();
    let runs: Vec<Metrics> = jobs
        .par_iter()
        .map(|&(c, i)| {
            let s = Scenario {
                seed: space.scenario.seed + i as u64,
                ..scenarios[c].clone()
            };
            run_on_stream(&s, &streams[i]).map(|(m, _)| m)
        })
        .collect::<Result<_>>()?;
    combos
        .iter()
        .enumerate()
        .map(|(c, combo)| {
            let metrics = &runs[c * reps..(c + 1) * reps];
            let objectives: Vec<f64> = metrics
                .iter()
                .map(|m| objective(m, weights, combo.delta_s))
                .collect::<Result<_>>()?;
            let (mean_objective, se) = mean_and_se(&objectives);
            let metric_means = (0..METRIC_NAMES.len())
                .map(|k| mean_and_se(&metrics.iter().map(|m| m.values()[k]).collect::<Vec<_>>()).0)
                .collect();
            Ok(GridRow {
                combination: *combo,
                mean_objective,
                se,
                metric_means,
                objectives,
            })
        })
        .collect()
}

/// Runs a searcher to completion. Replication `i` of every combination uses
/// seed `scenario.seed + i` and the same demand stream.
pub fn search_with<S: Searcher + ?Sized>(
    searcher: &mut S,
    space: &SearchSpace,
    weights: &ObjectiveWeights,
) -> Result<SearchResult> {
    weights.validate()?;
    space.validate()?;
    let streams: Vec<Vec<DemandEvent>> = (0..space.replications)
        .into_par_iter()
        .map(|i| {
            Scenario {
                seed: space.scenario.seed + i as u64,
                ..space.scenario.clone()
            }
            .demand_stream()
        })
        .collect::<Result<_>>()?;
    let mut table: Vec<GridRow> = Vec::new();
    while let Some(batch) = searcher.propose(space, &table) {
        if batch.is_empty() {
            break;
        }
        table.extend(evaluate(space, weights, &streams, &batch)?);
    }
    let i = argmin(&table).ok_or_else(|| Error::SpaceInvalid("searcher proposed nothing".into()))?;
    Ok(SearchResult {
        best: table[i].combination,
        best_objective: table[i].mean_objective,
        table,
    })
}

/// Exhaustive search over the full grid.
pub fn grid_search(space: &SearchSpace, weights: &ObjectiveWeights) -> Result<SearchResult> {
    search_with(&mut ExhaustiveGrid::default(), space, weights)
}

/// Best slot length among `candidates_s`, keeping the scenario's ρ* and
/// slack fixed. Uses one replication at the scenario's seed.
pub fn optimize_interval_length(
    scenario: &Scenario,
    candidates_s: &[u64],
    weights: &ObjectiveWeights,
) -> Result<u64> {
    let space = SearchSpace {
        delta_s: candidates_s.to_vec(),
        rho_free: vec![scenario.policy.rho_free],
        slack: vec![scenario.policy.rho_hard - scenario.policy.rho_free],
        replications: 1,
        scenario: scenario.clone(),
    };
    Ok(grid_search(&space, weights)?.best.delta_s)
}
