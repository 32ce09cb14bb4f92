//! Error series, decay-rate fits and audits of the convergence bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::program::ProgramSpec;
use crate::reference::KktSolution;
use crate::solver::{SolverConfig, Variant};
use crate::trace::IterateTrace;

/// Absolute slack for per-step monotonicity checks.
pub const MONOTONE_TOL: f64 = 1e-9;
/// Relative slack for the pointwise bounds.
pub const BOUND_TOL: f64 = 1e-9;

pub const MIN_FIT_SAMPLES: usize = 10;

/// Objective and constraint errors of the running average at each sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub t: Vec<usize>,
    /// `|f(x̄(t)) - f*|`.
    pub objective: Vec<f64>,
    /// `max_k max(g_k(x̄(t)), 0)`.
    pub constraint: Vec<f64>,
}

impl ErrorSeries {
    pub fn objective_points(&self) -> Vec<(f64, f64)> {
        self.t
            .iter()
            .map(|t| *t as f64)
            .zip(self.objective.iter().copied())
            .collect()
    }

    pub fn constraint_points(&self) -> Vec<(f64, f64)> {
        self.t
            .iter()
            .map(|t| *t as f64)
            .zip(self.constraint.iter().copied())
            .collect()
    }
}

pub fn error_series(trace: &IterateTrace, reference: &KktSolution) -> ErrorSeries {
    let mut out = ErrorSeries::default();
    for s in trace.samples() {
        out.t.push(s.t);
        out.objective.push((s.f_avg - reference.f_star).abs());
        out.constraint
            .push(s.g_avg.iter().fold(0.0, |acc: f64, g| acc.max(*g)));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateModel {
    /// `e(t) ≈ C t^(-p)`.
    Power,
    /// `e(t) ≈ (C / t) r^t`.
    Geometric,
}

impl std::str::FromStr for RateModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(RateModel::Power),
            "geometric" => Ok(RateModel::Geometric),
            other => Err(Error::Parse(format!("unknown rate model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    /// Exponent `p` for the power model, ratio `r` for the geometric one.
    pub rate: f64,
    pub constant: f64,
    /// Coefficient of determination of the predicted `log e(t)`, clamped to
    /// `[0, 1]`. Comparable across models fitted on the same window.
    pub quality: f64,
    pub window: [f64; 2],
    pub samples: usize,
}

/// Least squares `y = a + b x`; returns `(a, b)`.
fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (xi, yi) in x.iter().zip(y) {
        sxy += (xi - mx) * (yi - my);
        sxx += (xi - mx) * (xi - mx);
    }
    let b = sxy / sxx;
    (my - b * mx, b)
}

fn r_squared(actual: &[f64], predicted: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean = actual.iter().sum::<f64>() / n;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let ss_res: f64 = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
}

/// The last `fraction` of the log-time span of `series` (points with `t >= 1`).
pub fn log_tail_window(series: &[(f64, f64)], fraction: f64) -> Result<[f64; 2]> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "window fraction must be in (0, 1], got {fraction}"
        )));
    }
    let ts = series.iter().map(|p| p.0).filter(|t| *t >= 1.0);
    let (lo, hi) = ts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
        (lo.min(t), hi.max(t))
    });
    if !(lo <= hi) {
        return Err(Error::Invalid("series has no samples with t >= 1".into()));
    }
    let (llo, lhi) = (lo.ln(), hi.ln());
    Ok([(lhi - fraction * (lhi - llo)).exp(), hi])
}

/// Fits `model` to the points of `series` with `t` in `window` and error above
/// `floor`. Zeros and negatives are always dropped.
pub fn fit_in_window(
    series: &[(f64, f64)],
    model: RateModel,
    window: [f64; 2],
    floor: f64,
) -> Result<RateFit> {
    // Log-spaced windows computed through exp/ln can land a hair off integer t.
    let (lo, hi) = (window[0] * (1.0 - 1e-12), window[1] * (1.0 + 1e-12));
    let pts: Vec<(f64, f64)> = series
        .iter()
        .copied()
        .filter(|(t, e)| {
            *t >= lo && *t <= hi && *t > 0.0 && e.is_finite() && *e > 0.0 && *e > floor
        })
        .collect();
    if pts.len() < MIN_FIT_SAMPLES {
        return Err(Error::Invalid(format!(
            "need at least {MIN_FIT_SAMPLES} positive samples in [{}, {}], found {}",
            window[0],
            window[1],
            pts.len()
        )));
    }
    let log_e: Vec<f64> = pts.iter().map(|(_, e)| e.ln()).collect();
    let (rate, constant, predicted) = match model {
        RateModel::Power => {
            let x: Vec<f64> = pts.iter().map(|(t, _)| t.ln()).collect();
            let (a, b) = line_fit(&x, &log_e);
            let pred = x.iter().map(|xi| a + b * xi).collect::<Vec<_>>();
            (-b, a.exp(), pred)
        }
        RateModel::Geometric => {
            let x: Vec<f64> = pts.iter().map(|(t, _)| *t).collect();
            let y: Vec<f64> = pts.iter().map(|(t, e)| (t * e).ln()).collect();
            let (a, b) = line_fit(&x, &y);
            let pred = x.iter().map(|t| a + b * t - t.ln()).collect::<Vec<_>>();
            (b.exp(), a.exp(), pred)
        }
    };
    if !rate.is_finite() {
        return Err(Error::Numerical("fitted rate is not finite".into()));
    }
    Ok(RateFit {
        model,
        rate,
        constant,
        quality: r_squared(&log_e, &predicted),
        window,
        samples: pts.len(),
    })
}

/// Power-law fit over the last `window_fraction` of log-time.
pub fn fit_power_decay(series: &[(f64, f64)], window_fraction: f64) -> Result<RateFit> {
    let window = log_tail_window(series, window_fraction)?;
    fit_in_window(series, RateModel::Power, window, 0.0)
}

/// `(1/t) r^t` fit over the last `window_fraction` of log-time.
pub fn fit_geometric(series: &[(f64, f64)], window_fraction: f64) -> Result<RateFit> {
    let window = log_tail_window(series, window_fraction)?;
    let fit = fit_in_window(series, RateModel::Geometric, window, 0.0)?;
    if !(fit.rate > 0.0 && fit.rate < 1.0) {
        return Err(Error::Numerical(format!(
            "series is not decaying geometrically (ratio {})",
            fit.rate
        )));
    }
    Ok(fit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub name: String,
    pub applicable: bool,
    /// `min (bound - value)` over the audited points; negative means violated.
    pub worst_margin: Option<f64>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AuditEntry {
    fn skipped(name: &str, why: String) -> Self {
        Self {
            name: name.into(),
            applicable: false,
            worst_margin: None,
            pass: true,
            note: Some(why),
        }
    }

    fn checked(name: &str, margin: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            applicable: true,
            worst_margin: Some(margin),
            pass: margin >= -tol,
            note: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub entries: Vec<AuditEntry>,
    pub all_pass: bool,
}

impl AuditReport {
    pub fn get(&self, name: &str) -> Option<&AuditEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

pub const OBJECTIVE_BOUND: &str = "objective_bound";
pub const CONSTRAINT_BOUND: &str = "constraint_bound";
pub const QUEUE_BOUND: &str = "queue_bound";
pub const DRIFT_PLUS_PENALTY: &str = "drift_plus_penalty_bound";
pub const DUAL_GAP_BOUND: &str = "dual_gap_bound";
pub const MULTIPLIER_DISTANCE_MONOTONE: &str = "multiplier_distance_monotone";
pub const DUAL_VALUE_MONOTONE: &str = "dual_value_monotone";

/// `a >= b` up to a relative `1e-12`, so that thresholds like `4/0.34` versus
/// `2 (sqrt 2)^2 / 0.34` compare equal.
fn at_least(a: f64, b: f64) -> bool {
    a >= b * (1.0 - 1e-12)
}

fn min_margin(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::INFINITY, f64::min)
}

/// Checks every applicable convergence guarantee against a trace.
///
/// The primal guarantees need `V >= m beta^2 / alpha` and iterates that follow
/// the drift-plus-penalty recursion (the dual-subgradient form qualifies when
/// its step is `1/V`). The dual ones need `gamma`: the `theta / t` bound and the
/// multiplier-distance monotonicity need `V >= gamma`, dual-value monotonicity
/// needs `V >= gamma / 2`.
pub fn audit_bounds(
    trace: &IterateTrace,
    reference: &KktSolution,
    program: &ProgramSpec,
    config: &SolverConfig,
    gamma: Option<f64>,
) -> Result<AuditReport> {
    if reference.lambda_star.len() != program.m() {
        return Err(Error::dim(
            "reference multiplier",
            program.m(),
            reference.lambda_star.len(),
        ));
    }
    let v = config.v;
    let v_min = program.m() as f64 * program.beta().powi(2) / program.alpha();
    let same_dynamics = match config.variant {
        Variant::DualSubgradient => (config.step_size() * v - 1.0).abs() <= 1e-12,
        _ => true,
    };
    let standard_average = config.variant != Variant::DppShifted;
    let primal_ok = at_least(v, v_min) && same_dynamics;
    let primal_why = if !same_dynamics {
        "step size differs from 1/V".to_string()
    } else {
        format!("V = {v} < m beta^2 / alpha = {v_min}")
    };

    let samples = trace.samples();
    let f_star = reference.f_star;
    let lam_norm = reference.lambda_norm();
    let q0_sq = config.q0.norm_squared();
    let queue_bound = (q0_sq + v * v * lam_norm * lam_norm).sqrt() + v * lam_norm;
    let mut entries = Vec::new();

    if primal_ok && standard_average {
        let margin = min_margin(
            samples
                .iter()
                .map(|s| f_star + q0_sq / (2.0 * v * s.t as f64) - s.f_avg),
        );
        entries.push(AuditEntry::checked(
            OBJECTIVE_BOUND,
            margin,
            BOUND_TOL * (1.0 + f_star.abs()),
        ));
        let margin = min_margin(
            samples
                .iter()
                .flat_map(|s| s.g_avg.iter().map(move |g| queue_bound / s.t as f64 - g)),
        );
        entries.push(AuditEntry::checked(
            CONSTRAINT_BOUND,
            margin,
            BOUND_TOL * (1.0 + queue_bound),
        ));
    } else {
        let why = if primal_ok {
            "shifted averages are not covered by this bound".to_string()
        } else {
            primal_why.clone()
        };
        entries.push(AuditEntry::skipped(OBJECTIVE_BOUND, why.clone()));
        entries.push(AuditEntry::skipped(CONSTRAINT_BOUND, why));
    }

    if primal_ok {
        let margin = min_margin(samples.iter().map(|s| queue_bound - s.queue_norm));
        entries.push(AuditEntry::checked(
            QUEUE_BOUND,
            margin,
            BOUND_TOL * (1.0 + queue_bound),
        ));
        match trace.steps.max_dpp_excess {
            Some(excess) if trace.iterations > 0 => {
                // The excess is a difference of quantities of size V |f*| and
                // ||Q||^2 / 2.
                let scale = 1.0 + v * f_star.abs() + 0.5 * queue_bound * queue_bound;
                entries.push(AuditEntry::checked(
                    DRIFT_PLUS_PENALTY,
                    -excess,
                    BOUND_TOL * scale,
                ));
            }
            _ => entries.push(AuditEntry::skipped(
                DRIFT_PLUS_PENALTY,
                "run was not given a reference solution".into(),
            )),
        }
    } else {
        entries.push(AuditEntry::skipped(QUEUE_BOUND, primal_why.clone()));
        entries.push(AuditEntry::skipped(DRIFT_PLUS_PENALTY, primal_why));
    }

    match gamma {
        None => {
            for name in [
                DUAL_GAP_BOUND,
                MULTIPLIER_DISTANCE_MONOTONE,
                DUAL_VALUE_MONOTONE,
            ] {
                entries.push(AuditEntry::skipped(
                    name,
                    "no dual smoothness modulus given".into(),
                ));
            }
        }
        Some(gamma) => {
            let full = at_least(v, gamma) && same_dynamics;
            let half = at_least(v, gamma / 2.0) && same_dynamics;
            let why = |need: f64| {
                if same_dynamics {
                    format!("V = {v} < {need}")
                } else {
                    "step size differs from 1/V".to_string()
                }
            };
            if full {
                match trace.steps.initial_dual_value {
                    Some(q0) => {
                        let lambda0 = &config.q0 / v;
                        let theta = crate::dual::theta_bound(
                            v,
                            gamma,
                            &lambda0,
                            &reference.lambda_star,
                            q0,
                            f_star,
                        )?;
                        let margin = min_margin(
                            samples
                                .iter()
                                .map(|s| theta / s.t as f64 - (f_star - s.dual_value)),
                        );
                        entries.push(AuditEntry::checked(
                            DUAL_GAP_BOUND,
                            margin,
                            BOUND_TOL * (1.0 + f_star.abs()),
                        ));
                    }
                    None => entries.push(AuditEntry::skipped(
                        DUAL_GAP_BOUND,
                        "trace has no iterations".into(),
                    )),
                }
                match trace.steps.max_lambda_dist_increase {
                    Some(inc) => entries.push(AuditEntry::checked(
                        MULTIPLIER_DISTANCE_MONOTONE,
                        -inc,
                        MONOTONE_TOL,
                    )),
                    None => entries.push(AuditEntry::skipped(
                        MULTIPLIER_DISTANCE_MONOTONE,
                        "run was not given a reference solution or has one step".into(),
                    )),
                }
            } else {
                entries.push(AuditEntry::skipped(DUAL_GAP_BOUND, why(gamma)));
                entries.push(AuditEntry::skipped(
                    MULTIPLIER_DISTANCE_MONOTONE,
                    why(gamma),
                ));
            }
            if half {
                match trace.steps.max_dual_decrease {
                    Some(dec) => {
                        entries.push(AuditEntry::checked(DUAL_VALUE_MONOTONE, -dec, MONOTONE_TOL))
                    }
                    None => entries.push(AuditEntry::skipped(
                        DUAL_VALUE_MONOTONE,
                        "run has fewer than two steps".into(),
                    )),
                }
            } else {
                entries.push(AuditEntry::skipped(DUAL_VALUE_MONOTONE, why(gamma / 2.0)));
            }
        }
    }

    let all_pass = entries.iter().all(|e| e.pass);
    Ok(AuditReport { entries, all_pass })
}
