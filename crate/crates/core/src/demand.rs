//! Controlled batch semi-Markov arrival flow of entry requests.
//!
//! Arrival epochs are the jump times of a semi-Markov phase process: in phase
//! `i` the process waits a sojourn drawn from `sojourn[i]`, emits a batch of
//! requests whose size is drawn from `batch[i]`, and then moves to the next
//! phase according to row `i` of the transition matrix. A [`ControlAction`]
//! scales the arrival intensity and shifts batch sizes.
//!
//! Every draw goes through an explicit RNG, so a stream is a pure function of
//! `(spec, action, horizon, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums and batch vectors must be stochastic within this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-9;

/// Maximum number of refinement sweeps in [`stationary_phase_distribution`].
pub const STATIONARY_MAX_REFINEMENTS: usize = 20;

const STATIONARY_RESIDUAL_TOL: f64 = 1e-12;

/// Duration law of a phase sojourn, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DurationLaw {
    PointMass { value: f64 },
    Exponential { mean: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl DurationLaw {
    pub fn mean(&self) -> f64 {
        match *self {
            DurationLaw::PointMass { value } => value,
            DurationLaw::Exponential { mean } => mean,
            DurationLaw::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    /// The same family with every time parameter multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> DurationLaw {
        match *self {
            DurationLaw::PointMass { value } => DurationLaw::PointMass {
                value: value * factor,
            },
            DurationLaw::Exponential { mean } => DurationLaw::Exponential {
                mean: mean * factor,
            },
            DurationLaw::Uniform { lo, hi } => DurationLaw::Uniform {
                lo: lo * factor,
                hi: hi * factor,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DurationLaw::PointMass { value } => value,
            DurationLaw::Exponential { mean } => {
                let unit: f64 = Exp1.sample(rng);
                unit * mean
            }
            DurationLaw::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
        }
    }

    fn check(&self, phase: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::RejectSpec(format!("phase {phase}: {what}")));
        match *self {
            DurationLaw::PointMass { value } if !(value >= 0.0 && value.is_finite()) => {
                bad("point-mass sojourn must be finite and >= 0")
            }
            DurationLaw::Exponential { mean } if !(mean > 0.0 && mean.is_finite()) => {
                bad("exponential sojourn mean must be finite and > 0")
            }
            DurationLaw::Uniform { lo, hi } if !(lo > 0.0 && hi >= lo && hi.is_finite()) => {
                bad("uniform sojourn needs 0 < lo <= hi")
            }
            _ => Ok(()),
        }
    }
}

/// Embedded phase chain plus per-phase sojourn laws.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseKernel {
    pub transition: Vec<Vec<f64>>,
    pub sojourn: Vec<DurationLaw>,
}

impl PhaseKernel {
    pub fn n_phases(&self) -> usize {
        self.transition.len()
    }

    /// Checks stochasticity, parameter signs and irreducibility from `initial`.
    pub fn validate(&self, initial: usize) -> Result<()> {
        let n = self.n_phases();
        if n == 0 {
            return Err(Error::RejectSpec("kernel has no phases".into()));
        }
        if self.sojourn.len() != n {
            return Err(Error::RejectSpec(format!(
                "{} sojourn laws for {n} phases",
                self.sojourn.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::RejectSpec(format!(
                    "transition row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(p) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::RejectSpec(format!(
                    "transition row {i} has probability {p} outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::RejectSpec(format!(
                    "transition row {i} is not stochastic (row sum {sum})"
                )));
            }
        }
        for (i, law) in self.sojourn.iter().enumerate() {
            law.check(i)?;
        }
        if initial >= n {
            return Err(Error::RejectSpec(format!(
                "initial phase {initial} out of range for {n} phases"
            )));
        }
        let forward = reachable(n, initial, |i, j| self.transition[i][j] > 0.0);
        if let Some(j) = forward.iter().position(|r| !r) {
            return Err(Error::RejectSpec(format!(
                "phase {j} is unreachable from initial phase {initial}"
            )));
        }
        let backward = reachable(n, initial, |i, j| self.transition[j][i] > 0.0);
        if let Some(j) = backward.iter().position(|r| !r) {
            return Err(Error::RejectSpec(format!(
                "phase {j} cannot return to initial phase {initial} (chain is not a single communicating class)"
            )));
        }
        Ok(())
    }
}

fn reachable(n: usize, start: usize, edge: impl Fn(usize, usize) -> bool) -> Vec<bool> {
    let mut seen = vec![false; n];
    let mut stack = vec![start];
    seen[start] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if !seen[j] && edge(i, j) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen
}

/// Per-phase probability vectors over batch sizes `1..=len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BatchLaw(pub Vec<Vec<f64>>);

impl BatchLaw {
    pub fn max_batch(&self) -> usize {
        self.0.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn mean(&self, phase: usize) -> f64 {
        self.0[phase]
            .iter()
            .enumerate()
            .map(|(k, p)| (k + 1) as f64 * p)
            .sum()
    }

    fn validate(&self, n_phases: usize) -> Result<()> {
        if self.0.len() != n_phases {
            return Err(Error::RejectSpec(format!(
                "{} batch vectors for {n_phases} phases",
                self.0.len()
            )));
        }
        for (i, probs) in self.0.iter().enumerate() {
            if probs.is_empty() {
                return Err(Error::RejectSpec(format!("batch vector {i} is empty")));
            }
            if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::RejectSpec(format!(
                    "batch vector {i} has a probability outside [0, 1]"
                )));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::RejectSpec(format!(
                    "batch vector {i} is not stochastic (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// Control applied to the arrival flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    /// Multiplies arrival intensity; sojourns are divided by it.
    pub rate_multiplier: f64,
    /// Added to every drawn batch size.
    #[serde(default)]
    pub batch_shift: u32,
}

impl ControlAction {
    pub const IDENTITY: ControlAction = ControlAction {
        rate_multiplier: 1.0,
        batch_shift: 0,
    };

    pub fn new(rate_multiplier: f64, batch_shift: u32) -> Result<Self> {
        let action = ControlAction {
            rate_multiplier,
            batch_shift,
        };
        action.validate()?;
        Ok(action)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate_multiplier > 0.0 && self.rate_multiplier.is_finite() {
            Ok(())
        } else {
            Err(Error::RejectAction(format!(
                "rate_multiplier must be finite and > 0, got {}",
                self.rate_multiplier
            )))
        }
    }
}

impl Default for ControlAction {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Piecewise-constant intensity of desired entry times over the horizon.
///
/// Bin `i` covers `[i * bin_s, (i + 1) * bin_s)` and is chosen with probability
/// proportional to `weights[i]`; the desired time is uniform inside the bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceLaw {
    pub bin_s: f64,
    pub weights: Vec<f64>,
}

impl PreferenceLaw {
    pub fn span_s(&self) -> f64 {
        self.bin_s * self.weights.len() as f64
    }

    fn validate(&self) -> Result<()> {
        if !(self.bin_s > 0.0 && self.bin_s.is_finite()) {
            return Err(Error::RejectSpec("preference bin_s must be > 0".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::RejectSpec(
                "preference weights must be finite and nonnegative".into(),
            ));
        }
        if !self.weights.iter().any(|w| *w > 0.0) {
            return Err(Error::RejectSpec(
                "preference weights are all zero".into(),
            ));
        }
        Ok(())
    }
}

/// Full description of a controlled batch semi-Markov demand flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "DemandSpecFile", into = "DemandSpecFile")]
pub struct DemandProcessSpec {
    pub kernel: PhaseKernel,
    pub batch: BatchLaw,
    pub initial_phase: usize,
    pub preference: PreferenceLaw,
    /// Probability that a generated request accepts paid coupons.
    pub p_pay: f64,
    /// Half-width of the acceptable window around the desired start.
    pub flexibility_s: u64,
    /// Action configured alongside the spec; used when no explicit action is given.
    pub control: ControlAction,
}

/// On-disk layout of a demand spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandSpecFile {
    phases: usize,
    transition: Vec<Vec<f64>>,
    sojourn: Vec<DurationLaw>,
    batch: Vec<Vec<f64>>,
    #[serde(default)]
    initial_phase: usize,
    #[serde(default)]
    control: ControlAction,
    preference: PreferenceLaw,
    p_pay: f64,
    flexibility_s: u64,
}

impl From<DemandSpecFile> for DemandProcessSpec {
    fn from(f: DemandSpecFile) -> Self {
        let mut transition = f.transition;
        // A declared phase without a row surfaces as an empty row at validation.
        while transition.len() < f.phases {
            transition.push(Vec::new());
        }
        DemandProcessSpec {
            kernel: PhaseKernel {
                transition,
                sojourn: f.sojourn,
            },
            batch: BatchLaw(f.batch),
            initial_phase: f.initial_phase,
            preference: f.preference,
            p_pay: f.p_pay,
            flexibility_s: f.flexibility_s,
            control: f.control,
        }
    }
}

impl From<DemandProcessSpec> for DemandSpecFile {
    fn from(s: DemandProcessSpec) -> Self {
        DemandSpecFile {
            phases: s.kernel.n_phases(),
            transition: s.kernel.transition,
            sojourn: s.kernel.sojourn,
            batch: s.batch.0,
            initial_phase: s.initial_phase,
            control: s.control,
            preference: s.preference,
            p_pay: s.p_pay,
            flexibility_s: s.flexibility_s,
        }
    }
}

impl DemandProcessSpec {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate(self.initial_phase)?;
        self.batch.validate(self.kernel.n_phases())?;
        self.preference.validate()?;
        if !(0.0..=1.0).contains(&self.p_pay) {
            return Err(Error::RejectSpec(format!(
                "p_pay {} outside [0, 1]",
                self.p_pay
            )));
        }
        self.control
            .validate()
            .map_err(|e| Error::RejectSpec(e.to_string()))?;
        let pi = stationary_phase_distribution(&self.kernel)?;
        let mean_sojourn: f64 = pi
            .iter()
            .zip(&self.kernel.sojourn)
            .map(|(p, law)| p * law.mean())
            .sum();
        if mean_sojourn <= 0.0 {
            return Err(Error::RejectSpec(
                "stationary mean sojourn is zero (infinite arrival rate)".into(),
            ));
        }
        Ok(())
    }
}

/// Returns the spec unchanged iff every invariant holds.
pub fn validate_spec(spec: DemandProcessSpec) -> Result<DemandProcessSpec> {
    spec.validate()?;
    Ok(spec)
}

/// Stationary distribution of the embedded phase chain.
///
/// Solves `π (P - I) = 0, Σ π = 1` by Gaussian elimination and then applies
/// residual-correction sweeps until `‖πP − π‖∞` is below 1e-12, giving up with
/// [`Error::NoConvergence`] after [`STATIONARY_MAX_REFINEMENTS`] sweeps.
pub fn stationary_phase_distribution(kernel: &PhaseKernel) -> Result<Vec<f64>> {
    let n = kernel.n_phases();
    if n == 0 || kernel.transition.iter().any(|r| r.len() != n) {
        return Err(Error::RejectSpec("transition matrix is not square".into()));
    }
    let p = &kernel.transition;
    // Rows of the system: (P^T - I) with the last equation replaced by Σπ = 1.
    let mut a = vec![vec![0.0; n]; n];
    for (i, row) in a.iter_mut().enumerate().take(n - 1) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = p[j][i] - if i == j { 1.0 } else { 0.0 };
        }
    }
    a[n - 1].iter_mut().for_each(|v| *v = 1.0);
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;

    let mut pi = solve_dense(&a, &b).ok_or(Error::NoConvergence {
        iterations: 0,
        residual: f64::INFINITY,
    })?;
    let mut residual = stationary_residual(p, &pi);
    let mut sweeps = 0;
    while residual >= STATIONARY_RESIDUAL_TOL && sweeps < STATIONARY_MAX_REFINEMENTS {
        let r: Vec<f64> = (0..n)
            .map(|i| b[i] - (0..n).map(|j| a[i][j] * pi[j]).sum::<f64>())
            .collect();
        if let Some(delta) = solve_dense(&a, &r) {
            pi.iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
        }
        normalize(&mut pi);
        residual = stationary_residual(p, &pi);
        sweeps += 1;
    }
    normalize(&mut pi);
    residual = stationary_residual(p, &pi);
    if residual >= STATIONARY_RESIDUAL_TOL {
        return Err(Error::NoConvergence {
            iterations: sweeps,
            residual,
        });
    }
    Ok(pi)
}

fn normalize(pi: &mut [f64]) {
    for x in pi.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = pi.iter().sum();
    if s > 0.0 {
        pi.iter_mut().for_each(|x| *x /= s);
    }
}

fn stationary_residual(p: &[Vec<f64>], pi: &[f64]) -> f64 {
    let n = pi.len();
    (0..n)
        .map(|j| ((0..n).map(|i| pi[i] * p[i][j]).sum::<f64>() - pi[j]).abs())
        .fold(0.0, f64::max)
}

/// Gaussian elimination with partial pivoting; `None` if singular.
fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(row, bi)| {
            let mut r = row.clone();
            r.push(*bi);
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f != 0.0 {
                for k in col..=n {
                    m[row][k] -= f * m[col][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[i][k] * x[k]).sum();
        x[i] = (m[i][n] - s) / m[i][i];
    }
    Some(x)
}

/// Long-run request intensity, in requests per second.
///
/// `λ = m · Σ π_i (E[B_i] + shift) / Σ π_i E[τ_i]` where `m` is the rate multiplier.
pub fn mean_arrival_rate(spec: &DemandProcessSpec, action: &ControlAction) -> Result<f64> {
    spec.validate()?;
    action.validate()?;
    let pi = stationary_phase_distribution(&spec.kernel)?;
    let shift = f64::from(action.batch_shift);
    let batch: f64 = pi
        .iter()
        .enumerate()
        .map(|(i, p)| p * (spec.batch.mean(i) + shift))
        .sum();
    let sojourn: f64 = pi
        .iter()
        .zip(&spec.kernel.sojourn)
        .map(|(p, law)| p * law.mean())
        .sum();
    Ok(action.rate_multiplier * batch / sojourn)
}

/// Transforms the spec so that uncontrolled generation reproduces controlled
/// generation of the original, draw for draw.
pub fn apply_control(spec: &DemandProcessSpec, action: &ControlAction) -> Result<DemandProcessSpec> {
    action.validate()?;
    let mut out = spec.clone();
    let factor = 1.0 / action.rate_multiplier;
    for law in &mut out.kernel.sojourn {
        *law = law.scaled(factor);
    }
    if action.batch_shift > 0 {
        let pad = action.batch_shift as usize;
        for probs in &mut out.batch.0 {
            let mut shifted = vec![0.0; pad];
            shifted.extend_from_slice(probs);
            *probs = shifted;
        }
    }
    out.control = ControlAction::IDENTITY;
    Ok(out)
}

/// One entry request produced by the demand flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandRequest {
    pub request_id: u64,
    /// Desired entry instant, seconds from horizon start.
    pub desired_time_s: f64,
    pub flexibility_s: u64,
    pub willing_to_pay: bool,
}

/// A batch of requests emitted at one arrival epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandEvent {
    pub epoch: f64,
    pub requests: Vec<DemandRequest>,
}

/// Generator state between steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorState {
    pub phase: usize,
    pub clock: f64,
    pub next_request_id: u64,
}

impl GeneratorState {
    pub fn start(spec: &DemandProcessSpec) -> Self {
        GeneratorState {
            phase: spec.initial_phase,
            clock: 0.0,
            next_request_id: 0,
        }
    }
}

/// Index drawn with probability proportional to `weights`.
pub(crate) fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if acc > u {
            return i;
        }
    }
    last_positive
}

/// One generator step: sojourn, batch, next phase, then per-request attributes.
pub fn next_event<R: Rng + ?Sized>(
    state: GeneratorState,
    spec: &DemandProcessSpec,
    action: &ControlAction,
    rng: &mut R,
) -> (DemandEvent, GeneratorState) {
    let phase = state.phase;
    let sojourn = spec.kernel.sojourn[phase]
        .scaled(1.0 / action.rate_multiplier)
        .sample(rng);
    let batch = sample_index(&spec.batch.0[phase], rng) + 1 + action.batch_shift as usize;
    let next_phase = sample_index(&spec.kernel.transition[phase], rng);
    let epoch = state.clock + sojourn;

    let mut next_id = state.next_request_id;
    let requests = (0..batch)
        .map(|_| {
            let bin = sample_index(&spec.preference.weights, rng);
            let desired_time_s = (bin as f64 + rng.random::<f64>()) * spec.preference.bin_s;
            let willing_to_pay = rng.random::<f64>() < spec.p_pay;
            let request = DemandRequest {
                request_id: next_id,
                desired_time_s,
                flexibility_s: spec.flexibility_s,
                willing_to_pay,
            };
            next_id += 1;
            request
        })
        .collect();

    (
        DemandEvent { epoch, requests },
        GeneratorState {
            phase: next_phase,
            clock: epoch,
            next_request_id: next_id,
        },
    )
}

/// All arrival events with epoch in `[0, horizon_s)`.
///
/// Zero-length sojourns fold their batch into the preceding event so that
/// epochs strictly increase.
pub fn generate_horizon(
    spec: &DemandProcessSpec,
    action: &ControlAction,
    horizon_s: f64,
    seed: u64,
) -> Result<Vec<DemandEvent>> {
    spec.validate()?;
    action.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = GeneratorState::start(spec);
    let mut events: Vec<DemandEvent> = Vec::new();
    if horizon_s.is_nan() || horizon_s <= 0.0 {
        return Ok(events);
    }
    loop {
        let (event, next) = next_event(state, spec, action, &mut rng);
        if event.epoch >= horizon_s {
            break;
        }
        match events.last_mut() {
            Some(last) if last.epoch == event.epoch => last.requests.extend(event.requests),
            _ => events.push(event),
        }
        state = next;
    }
    Ok(events)
}
