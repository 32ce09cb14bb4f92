//! Sampled iterate histories produced by the solvers.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State of a run after `t` iterations: `x(t)` is the iterate computed from
/// `Q(t)`, and `x_avg` is `x̄(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: usize,
    pub x: DVector<f64>,
    pub x_avg: DVector<f64>,
    pub queue: DVector<f64>,
    /// `lambda(t) = Q(t) / V`.
    pub multiplier: DVector<f64>,
    pub f_avg: f64,
    pub g_avg: DVector<f64>,
    pub queue_norm: f64,
    /// `q(lambda(t)) = f(x(t)) + lambda(t) . g(x(t))`.
    pub dual_value: f64,
    /// `||lambda(t) - lambda*||`, when a reference multiplier was supplied.
    pub lambda_dist: Option<f64>,
}

/// Worst per-iteration quantities over a whole run, including iterations that
/// were not sampled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub max_drift_residual: f64,
    /// `max_t [Delta(t) + V f(x(t)) - V f*]`, when `f*` was supplied.
    pub max_dpp_excess: Option<f64>,
    /// `q(lambda(0))`.
    pub initial_dual_value: Option<f64>,
    /// `max_t [q(lambda(t)) - q(lambda(t+1))]`; positive means `q` decreased.
    pub max_dual_decrease: Option<f64>,
    /// `max_t [||lambda(t+1) - lambda*|| - ||lambda(t) - lambda*||]`, when a
    /// reference multiplier was supplied.
    pub max_lambda_dist_increase: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterateTrace {
    samples: Vec<TraceSample>,
    pub steps: StepStats,
    /// Number of completed iterations.
    pub iterations: usize,
}

impl IterateTrace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sample. Indices must increase strictly and queues must be
    /// nonnegative.
    pub fn push(&mut self, sample: TraceSample) -> Result<()> {
        if let Some(last) = self.samples.last() {
            if sample.t <= last.t {
                return Err(Error::Invalid(format!(
                    "trace index {} does not follow {}",
                    sample.t, last.t
                )));
            }
        }
        if sample.queue.iter().any(|q| !(*q >= 0.0)) {
            return Err(Error::Invalid(format!(
                "negative queue at t = {}",
                sample.t
            )));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&TraceSample> {
        self.samples.last()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.samples.iter().map(|s| s.t)
    }
}
