//! Drift-plus-penalty, its shifted-running-average variant, and the dual
//! subgradient method.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::InnerOracle;
use crate::program::ProgramSpec;
use crate::queue::{drift_identity_residual, QueueState};
use crate::reference::KktSolution;
use crate::trace::{IterateTrace, StepStats, TraceSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Queues plus a running average from iteration 0.
    Dpp,
    /// Queues plus the average over the most recent half of the iterates,
    /// refreshed at even iteration counts.
    DppShifted,
    /// `lambda(t+1) = max(lambda(t) + c g(x(t)), 0)` with `x(t)` minimizing
    /// `f + lambda(t) . g`.
    DualSubgradient,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpp" => Ok(Variant::Dpp),
            "dpp-shifted" => Ok(Variant::DppShifted),
            "dual-subgradient" => Ok(Variant::DualSubgradient),
            other => Err(Error::Invalid(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// Which iteration counts `t` get a [`TraceSample`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Roughly `per_decade` log-spaced indices per power of ten.
    Logarithmic { per_decade: usize },
    /// Every `stride`-th iteration. `stride = 1` keeps the full history.
    Linear { stride: usize },
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Logarithmic { per_decade: 200 }
    }
}

/// `log`, `log:<per-decade>`, `linear:<stride>` or `full`.
impl std::str::FromStr for Sampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let count = |v: &str| match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Parse(format!(
                "expected a positive integer, got '{v}'"
            ))),
        };
        match s.split_once(':') {
            None if s == "log" => Ok(Sampling::default()),
            None if s == "full" => Ok(Sampling::full()),
            Some(("log", n)) => Ok(Sampling::Logarithmic {
                per_decade: count(n)?,
            }),
            Some(("linear", n)) => Ok(Sampling::Linear { stride: count(n)? }),
            _ => Err(Error::Parse(format!(
                "unknown sampling '{s}'; use log, log:<n>, linear:<stride> or full"
            ))),
        }
    }
}

impl Sampling {
    pub fn full() -> Self {
        Sampling::Linear { stride: 1 }
    }

    /// Sorted, distinct indices in `[1, iters]`; `iters` itself is always
    /// included.
    pub fn indices(&self, iters: usize) -> Vec<usize> {
        let mut out = Vec::new();
        if iters == 0 {
            return out;
        }
        match *self {
            Sampling::Linear { stride } => {
                let stride = stride.max(1);
                out.extend((stride..=iters).step_by(stride));
            }
            Sampling::Logarithmic { per_decade } => {
                let per_decade = per_decade.max(1) as f64;
                let top = (iters as f64).log10() * per_decade;
                let mut j = 0.0;
                while j <= top + 1e-9 {
                    let t = 10f64.powf(j / per_decade).round() as usize;
                    if t >= 1 && t <= iters && out.last() != Some(&t) {
                        out.push(t);
                    }
                    j += 1.0;
                }
            }
        }
        if out.last() != Some(&iters) {
            out.push(iters);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub v: f64,
    pub q0: DVector<f64>,
    pub iters: usize,
    pub variant: Variant,
    /// Dual-subgradient step `c`; defaults to `1 / V`.
    pub step: Option<f64>,
    pub sampling: Sampling,
}

impl SolverConfig {
    pub fn new(v: f64, m: usize, iters: usize, variant: Variant) -> Self {
        Self {
            v,
            q0: DVector::zeros(m),
            iters,
            variant,
            step: None,
            sampling: Sampling::default(),
        }
    }

    pub fn with_q0(mut self, q0: DVector<f64>) -> Self {
        self.q0 = q0;
        self
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = Some(step);
        self
    }

    pub fn step_size(&self) -> f64 {
        self.step.unwrap_or(1.0 / self.v)
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(Error::Precondition(format!(
                "V must be positive, got {}",
                self.v
            )));
        }
        if self.iters < 1 {
            return Err(Error::Precondition(
                "iteration budget must be at least 1".into(),
            ));
        }
        if self.q0.len() != m {
            return Err(Error::dim("initial queue", m, self.q0.len()));
        }
        QueueState::new(self.q0.clone())?;
        let step = self.step_size();
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Precondition(format!(
                "step size must be positive, got {step}"
            )));
        }
        Ok(())
    }
}

/// `m beta^2 / alpha`, or `max(m beta^2 / alpha, gamma)` when a dual smoothness
/// modulus is given.
pub fn choose_v(program: &ProgramSpec, gamma: Option<f64>) -> f64 {
    let base = program.m() as f64 * program.beta().powi(2) / program.alpha();
    match gamma {
        Some(g) => base.max(g),
        None => base,
    }
}

/// Logs a warning when `v` is below the value [`choose_v`] recommends. Small
/// `V` is allowed; the objective and queue guarantees just no longer apply.
pub fn warn_if_small_v(program: &ProgramSpec, v: f64, gamma: Option<f64>) -> bool {
    let rec = choose_v(program, gamma);
    // Relative slack so that equal values computed two ways do not warn.
    let small = v < rec * (1.0 - 1e-12);
    if small {
        log::warn!("V = {v} is below the recommended {rec}; convergence bounds do not apply");
    }
    small
}

/// What the shifted average does at iteration count `t_plus_1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftedWindow {
    /// Mean of `x(first..=last)`.
    Range {
        first: usize,
        last: usize,
    },
    Hold,
}

pub fn shifted_average_window(t_plus_1: usize) -> ShiftedWindow {
    if t_plus_1 >= 2 && t_plus_1.is_multiple_of(2) {
        let s = t_plus_1 / 2;
        ShiftedWindow::Range {
            first: s,
            last: t_plus_1 - 1,
        }
    } else {
        ShiftedWindow::Hold
    }
}

/// The half-open range `[lo, hi)` of iterates whose mean is `x̄(t)` in the
/// shifted scheme. `x̄(1) = x(0)`; odd `t >= 3` hold `x̄(t - 1)`.
fn shifted_range(t: usize) -> (usize, usize) {
    let even = if t.is_multiple_of(2) { t } else { t - 1 };
    if even == 0 {
        (0, 1)
    } else {
        (even / 2, even)
    }
}

/// Neumaier-compensated vector sum.
#[derive(Clone, Debug)]
struct CompensatedSum {
    sum: DVector<f64>,
    comp: DVector<f64>,
}

impl CompensatedSum {
    fn new(n: usize) -> Self {
        Self {
            sum: DVector::zeros(n),
            comp: DVector::zeros(n),
        }
    }

    fn add(&mut self, x: &DVector<f64>) {
        for i in 0..x.len() {
            let s = self.sum[i];
            let t = s + x[i];
            if s.abs() >= x[i].abs() {
                self.comp[i] += (s - t) + x[i];
            } else {
                self.comp[i] += (x[i] - t) + s;
            }
            self.sum[i] = t;
        }
    }

    fn value(&self) -> DVector<f64> {
        &self.sum + &self.comp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AveragingMode {
    Standard,
    Shifted,
}

/// Running-average bookkeeping.
///
/// Both modes keep a compensated prefix sum `P(t) = sum_{tau < t} x(tau)`.
/// The standard average is `P(t) / t`. The shifted mode snapshots `P` at the
/// indices the sample schedule needs, so `x̄(t) = (P(hi) - P(lo)) / (hi - lo)`
/// costs `O(n)` memory per sample instead of a window of iterates.
#[derive(Clone, Debug)]
pub struct AveragingState {
    mode: AveragingMode,
    prefix: CompensatedSum,
    count: usize,
    snapshots: BTreeMap<usize, Option<DVector<f64>>>,
}

impl AveragingState {
    pub fn standard(n: usize) -> Self {
        Self {
            mode: AveragingMode::Standard,
            prefix: CompensatedSum::new(n),
            count: 0,
            snapshots: BTreeMap::new(),
        }
    }

    /// Shifted averaging able to report `x̄(t)` for every `t` in `samples`.
    pub fn shifted(n: usize, samples: &[usize]) -> Self {
        let mut snapshots = BTreeMap::new();
        for &t in samples.iter().filter(|t| **t >= 1) {
            let (lo, hi) = shifted_range(t);
            snapshots.insert(lo, None);
            snapshots.insert(hi, None);
        }
        if let Some(s) = snapshots.get_mut(&0) {
            *s = Some(DVector::zeros(n));
        }
        Self {
            mode: AveragingMode::Shifted,
            prefix: CompensatedSum::new(n),
            count: 0,
            snapshots,
        }
    }

    pub fn mode(&self) -> AveragingMode {
        self.mode
    }

    /// Number of iterates absorbed so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Absorbs `x(count)`.
    pub fn push(&mut self, x: &DVector<f64>) {
        self.prefix.add(x);
        self.count += 1;
        if let Some(s) = self.snapshots.get_mut(&self.count) {
            *s = Some(self.prefix.value());
        }
    }

    /// `x̄(t)` where `t = count()`. `None` before the first iterate, or in
    /// shifted mode when `t` was not part of the registered schedule.
    pub fn average(&self) -> Option<DVector<f64>> {
        if self.count == 0 {
            return None;
        }
        match self.mode {
            AveragingMode::Standard => Some(self.prefix.value() / self.count as f64),
            AveragingMode::Shifted => {
                let (lo, hi) = shifted_range(self.count);
                let p_lo = self.snapshots.get(&lo)?.as_ref()?;
                let p_hi = self.snapshots.get(&hi)?.as_ref()?;
                Some((p_hi - p_lo) / (hi - lo) as f64)
            }
        }
    }
}

/// Mutable state of one run. `queue` holds `Q(t)` for the drift-plus-penalty
/// variants and `lambda(t)` for the dual subgradient method.
#[derive(Clone, Debug)]
pub struct SolverState {
    pub t: usize,
    pub queue: QueueState,
    pub average: AveragingState,
}

/// Everything computed during iteration `t`.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub g: DVector<f64>,
    pub queue_next: QueueState,
    pub drift_residual: f64,
    /// `Delta(t) + V f(x(t))` expressed in queue units.
    pub drift_plus_penalty: f64,
}

pub struct Solver<'a> {
    program: &'a ProgramSpec,
    oracle: &'a dyn InnerOracle,
    config: &'a SolverConfig,
    reference: Option<&'a KktSolution>,
}

impl<'a> Solver<'a> {
    pub fn new(
        program: &'a ProgramSpec,
        oracle: &'a dyn InnerOracle,
        config: &'a SolverConfig,
    ) -> Result<Self> {
        config.validate(program.m())?;
        Ok(Self {
            program,
            oracle,
            config,
            reference: None,
        })
    }

    /// Attach a reference solution so samples carry `||lambda(t) - lambda*||`
    /// and the run tracks the per-iteration drift-plus-penalty excess.
    pub fn with_reference(mut self, reference: &'a KktSolution) -> Self {
        self.reference = Some(reference);
        self
    }

    pub fn initial_state(&self, samples: &[usize]) -> SolverState {
        let n = self.program.n();
        let average = match self.config.variant {
            Variant::DppShifted => AveragingState::shifted(n, samples),
            Variant::Dpp | Variant::DualSubgradient => AveragingState::standard(n),
        };
        let q0 = match self.config.variant {
            Variant::DualSubgradient => &self.config.q0 / self.config.v,
            _ => self.config.q0.clone(),
        };
        SolverState {
            t: 0,
            queue: QueueState::new(q0).expect("validated"),
            average,
        }
    }

    /// Computes `x(t)` and `g(x(t))` without advancing.
    fn iterate(&self, state: &SolverState) -> Result<(DVector<f64>, DVector<f64>)> {
        let x = match self.config.variant {
            Variant::DualSubgradient => self.oracle.argmin(state.queue.as_vector(), 1.0)?,
            _ => self.oracle.argmin(state.queue.as_vector(), self.config.v)?,
        };
        if x.len() != self.program.n() {
            return Err(Error::dim("oracle output", self.program.n(), x.len()));
        }
        let g = self.program.g(&x);
        Ok((x, g))
    }

    fn advance(
        &self,
        state: &mut SolverState,
        x: DVector<f64>,
        g: DVector<f64>,
    ) -> Result<StepRecord> {
        let increment = match self.config.variant {
            Variant::DualSubgradient => self.config.step_size() * &g,
            _ => g.clone(),
        };
        let queue_next = state.queue.update(&increment)?;
        let drift_residual = drift_identity_residual(&state.queue, &queue_next, &increment)?;
        let penalty_scale = match self.config.variant {
            Variant::DualSubgradient => 1.0,
            _ => self.config.v,
        };
        let drift = queue_next.lyapunov() - state.queue.lyapunov();
        let drift_plus_penalty = drift + penalty_scale * self.program.f(&x);
        state.average.push(&x);
        let record = StepRecord {
            t: state.t,
            x,
            g,
            queue_next: queue_next.clone(),
            drift_residual,
            drift_plus_penalty,
        };
        state.queue = queue_next;
        state.t += 1;
        Ok(record)
    }

    /// One full iteration: `x(t)` from the oracle, the queue update and the
    /// average update.
    pub fn dpp_step(&self, state: &mut SolverState) -> Result<StepRecord> {
        let (x, g) = self.iterate(state)?;
        self.advance(state, x, g)
    }

    fn multiplier(&self, queue: &QueueState) -> DVector<f64> {
        match self.config.variant {
            Variant::DualSubgradient => queue.as_vector().clone(),
            _ => queue.multiplier(self.config.v),
        }
    }

    fn sample(
        &self,
        state: &SolverState,
        x: &DVector<f64>,
        g: &DVector<f64>,
    ) -> Option<TraceSample> {
        let x_avg = state.average.average()?;
        let multiplier = self.multiplier(&state.queue);
        let g_avg = self.program.g(&x_avg);
        Some(TraceSample {
            t: state.t,
            x: x.clone(),
            f_avg: self.program.f(&x_avg),
            g_avg,
            x_avg,
            queue: &multiplier * self.config.v,
            queue_norm: multiplier.norm() * self.config.v,
            dual_value: self.program.f(x) + multiplier.dot(g),
            lambda_dist: self
                .reference
                .map(|r| (&multiplier - &r.lambda_star).norm()),
            multiplier,
        })
    }

    /// Runs `config.iters` iterations and returns the sampled trace.
    pub fn run(&self) -> Result<IterateTrace> {
        let samples = self.config.sampling.indices(self.config.iters);
        let mut state = self.initial_state(&samples);
        let mut trace = IterateTrace::new();
        let mut stats = StepStats {
            max_dpp_excess: self.reference.map(|_| f64::NEG_INFINITY),
            ..StepStats::default()
        };
        let mut prev_dual: Option<f64> = None;
        let mut prev_dist: Option<f64> = None;
        let penalty_scale = match self.config.variant {
            Variant::DualSubgradient => 1.0,
            _ => self.config.v,
        };
        let mut next_sample = samples.iter().copied().peekable();
        loop {
            let t = state.t;
            let (x, g) = match self.iterate(&state) {
                Ok(v) => v,
                Err(e) => {
                    trace.steps = stats;
                    trace.iterations = t;
                    return Err(Error::Oracle {
                        iteration: t,
                        source: Box::new(e),
                        partial: Box::new(trace),
                    });
                }
            };
            let multiplier = self.multiplier(&state.queue);
            let dual = self.program.f(&x) + multiplier.dot(&g);
            match prev_dual {
                None => stats.initial_dual_value = Some(dual),
                Some(p) => {
                    let worst = stats.max_dual_decrease.get_or_insert(f64::NEG_INFINITY);
                    *worst = worst.max(p - dual);
                }
            }
            prev_dual = Some(dual);
            if let Some(r) = self.reference {
                let dist = (&multiplier - &r.lambda_star).norm();
                if let Some(p) = prev_dist {
                    let worst = stats
                        .max_lambda_dist_increase
                        .get_or_insert(f64::NEG_INFINITY);
                    *worst = worst.max(dist - p);
                }
                prev_dist = Some(dist);
            }
            if next_sample.peek() == Some(&t) {
                next_sample.next();
                let sample = self.sample(&state, &x, &g).ok_or_else(|| {
                    Error::Numerical(format!("running average unavailable at t = {t}"))
                })?;
                trace.push(sample)?;
            }
            if t == self.config.iters {
                break;
            }
            let rec = self.advance(&mut state, x, g)?;
            stats.max_drift_residual = stats.max_drift_residual.max(rec.drift_residual);
            if let (Some(r), Some(worst)) = (self.reference, stats.max_dpp_excess.as_mut()) {
                *worst = worst.max(rec.drift_plus_penalty - penalty_scale * r.f_star);
            }
        }
        trace.steps = stats;
        trace.iterations = self.config.iters;
        Ok(trace)
    }
}

/// Convenience wrapper around [`Solver::run`].
pub fn run(
    program: &ProgramSpec,
    oracle: &dyn InnerOracle,
    config: &SolverConfig,
    reference: Option<&KktSolution>,
) -> Result<IterateTrace> {
    let solver = Solver::new(program, oracle, config)?;
    match reference {
        Some(r) => solver.with_reference(r).run(),
        None => solver.run(),
    }
}
