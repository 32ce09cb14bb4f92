//! Virtual queues and the quadratic Lyapunov function over them.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One nonnegative virtual queue per constraint. `Q(t) / V` is the dual
/// iterate `lambda(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QueueState(DVector<f64>);

impl QueueState {
    pub fn new(q: DVector<f64>) -> Result<Self> {
        if let Some((k, v)) = q
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Invalid(format!(
                "queue {k} must be finite and nonnegative, got {v}"
            )));
        }
        Ok(Self(q))
    }

    pub fn zeros(m: usize) -> Self {
        Self(DVector::zeros(m))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }

    /// `lambda = Q / V`.
    pub fn multiplier(&self, v: f64) -> DVector<f64> {
        &self.0 / v
    }

    /// `Q_k(t+1) = max(Q_k(t) + g_k, 0)`.
    pub fn update(&self, gvals: &DVector<f64>) -> Result<Self> {
        if gvals.len() != self.len() {
            return Err(Error::dim("constraint values", self.len(), gvals.len()));
        }
        Ok(Self(self.0.zip_map(gvals, |q, g| (q + g).max(0.0))))
    }

    /// `L = ||Q||^2 / 2`.
    pub fn lyapunov(&self) -> f64 {
        0.5 * self.0.norm_squared()
    }
}

impl TryFrom<Vec<f64>> for QueueState {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl From<QueueState> for Vec<f64> {
    fn from(q: QueueState) -> Self {
        q.0.as_slice().to_vec()
    }
}

/// Free-function form of [`QueueState::update`].
pub fn queue_update(q: &QueueState, gvals: &DVector<f64>) -> Result<QueueState> {
    q.update(gvals)
}

pub fn lyapunov(q: &QueueState) -> f64 {
    q.lyapunov()
}

/// Gap between the measured Lyapunov drift `L(q_next) - L(q)` and the closed
/// form `q_next . g - ||q_next - q||^2 / 2`. Zero up to rounding whenever
/// `q_next` is the queue update of `q` by `gvals`.
pub fn drift_identity_residual(
    q: &QueueState,
    q_next: &QueueState,
    gvals: &DVector<f64>,
) -> Result<f64> {
    if q_next.len() != q.len() {
        return Err(Error::dim("next queue", q.len(), q_next.len()));
    }
    if gvals.len() != q.len() {
        return Err(Error::dim("constraint values", q.len(), gvals.len()));
    }
    let measured = q_next.lyapunov() - q.lyapunov();
    let closed = q_next.0.dot(gvals) - 0.5 * (&q_next.0 - &q.0).norm_squared();
    Ok((measured - closed).abs())
}
