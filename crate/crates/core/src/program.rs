//! Strongly convex programs `min f(x) s.t. g(x) <= 0, x in X` with a box `X`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type ScalarFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Coordinate-wise bounds `lo <= x <= hi`. Infinite bounds are allowed, so
/// `BoxSet::unbounded(n)` is all of `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl BoxSet {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::dim("box bounds", lo.len(), hi.len()));
        }
        for (i, (l, h)) in lo.iter().zip(hi.iter()).enumerate() {
            if l.is_nan() || h.is_nan() || l > h {
                return Err(Error::Invalid(format!(
                    "box bound {i}: lo = {l} must not exceed hi = {h}"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: DVector::from_element(n, f64::NEG_INFINITY),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &DVector<f64> {
        &self.lo
    }

    pub fn hi(&self) -> &DVector<f64> {
        &self.hi
    }

    pub fn is_unbounded(&self) -> bool {
        self.lo.iter().all(|l| *l == f64::NEG_INFINITY)
            && self.hi.iter().all(|h| *h == f64::INFINITY)
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    /// A finite interior-ish point: the midpoint where both bounds are finite,
    /// otherwise the projection of zero.
    pub fn center(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.lo.iter().zip(self.hi.iter()).map(|(l, h)| {
                if l.is_finite() && h.is_finite() {
                    0.5 * (l + h)
                } else {
                    0.0f64.clamp(*l, *h)
                }
            }),
        )
    }

    /// Bounds clipped to `[-radius, radius]` around the origin, for sampling.
    fn sampling_bounds(&self, radius: f64) -> (DVector<f64>, DVector<f64>) {
        let lo = self.lo.map(|l| l.max(-radius));
        let hi = DVector::from_iterator(
            self.dim(),
            self.hi
                .iter()
                .zip(lo.iter())
                .map(|(h, l)| h.min(radius).max(*l)),
        );
        (lo, hi)
    }

    /// Uniform sample from the (radius-clipped) box.
    pub fn sample<R: Rng>(&self, rng: &mut R, radius: f64) -> DVector<f64> {
        let (lo, hi) = self.sampling_bounds(radius);
        DVector::from_iterator(
            self.dim(),
            lo.iter()
                .zip(hi.iter())
                .map(|(l, h)| if l < h { rng.gen_range(*l..=*h) } else { *l }),
        )
    }
}

/// A strongly convex program over a box.
///
/// `alpha` is the strong-convexity modulus of `f` on `X` and `beta` a common
/// Lipschitz modulus of every `g_k` on `X`. Gradients are optional; missing
/// ones are replaced by central differences.
#[derive(Clone)]
pub struct ProgramSpec {
    n: usize,
    m: usize,
    objective: ScalarFn,
    constraints: VectorFn,
    objective_grad: Option<VectorFn>,
    constraint_jacobian: Option<MatrixFn>,
    feasible_set: BoxSet,
    alpha: f64,
    beta: f64,
}

impl fmt::Debug for ProgramSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProgramSpec")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("feasible_set", &self.feasible_set)
            .field("alpha", &self.alpha)
            .field("beta", &self.beta)
            .field("analytic_gradients", &self.objective_grad.is_some())
            .finish()
    }
}

impl ProgramSpec {
    pub fn new(
        n: usize,
        m: usize,
        objective: ScalarFn,
        constraints: VectorFn,
        feasible_set: BoxSet,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Invalid(format!(
                "program needs n >= 1 and m >= 1 (got n = {n}, m = {m})"
            )));
        }
        if feasible_set.dim() != n {
            return Err(Error::dim("feasible set", n, feasible_set.dim()));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Invalid(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be positive, got {beta}")));
        }
        Ok(Self {
            n,
            m,
            objective,
            constraints,
            objective_grad: None,
            constraint_jacobian: None,
            feasible_set,
            alpha,
            beta,
        })
    }

    pub fn with_gradients(
        mut self,
        objective_grad: VectorFn,
        constraint_jacobian: MatrixFn,
    ) -> Self {
        self.objective_grad = Some(objective_grad);
        self.constraint_jacobian = Some(constraint_jacobian);
        self
    }

    /// Linear constraints `g(x) = A x - b`, with exact Jacobian.
    #[allow(clippy::too_many_arguments)]
    pub fn with_linear_constraints(
        n: usize,
        objective: ScalarFn,
        objective_grad: VectorFn,
        a: DMatrix<f64>,
        b: DVector<f64>,
        feasible_set: BoxSet,
        alpha: f64,
        beta: f64,
    ) -> Result<Self> {
        if a.ncols() != n {
            return Err(Error::dim("constraint matrix columns", n, a.ncols()));
        }
        if a.nrows() != b.len() {
            return Err(Error::dim("constraint right-hand side", a.nrows(), b.len()));
        }
        let m = a.nrows();
        let a = Arc::new(a);
        let a_g = Arc::clone(&a);
        let constraints: VectorFn = Arc::new(move |x| &*a_g * x - &b);
        let jac: MatrixFn = Arc::new(move |_| (*a).clone());
        Ok(
            Self::new(n, m, objective, constraints, feasible_set, alpha, beta)?
                .with_gradients(objective_grad, jac),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn feasible_set(&self) -> &BoxSet {
        &self.feasible_set
    }

    pub fn has_analytic_gradients(&self) -> bool {
        self.objective_grad.is_some() && self.constraint_jacobian.is_some()
    }

    pub fn f(&self, x: &DVector<f64>) -> f64 {
        (self.objective)(x)
    }

    pub fn g(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.constraints)(x)
    }

    pub fn grad_f(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.objective_grad {
            Some(grad) => grad(x),
            None => {
                let mut out = DVector::zeros(self.n);
                for i in 0..self.n {
                    out[i] = self.partial(x, i, |p| DVector::from_element(1, self.f(p)))[0];
                }
                out
            }
        }
    }

    /// Jacobian of `g`, `m x n`.
    pub fn jac_g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match &self.constraint_jacobian {
            Some(jac) => jac(x),
            None => {
                let mut out = DMatrix::zeros(self.m, self.n);
                for i in 0..self.n {
                    let col = self.partial(x, i, |p| self.g(p));
                    out.set_column(i, &col);
                }
                out
            }
        }
    }

    /// Central difference along coordinate `i`, falling back to a one-sided
    /// difference when a probe leaves the box.
    fn partial<F>(&self, x: &DVector<f64>, i: usize, eval: F) -> DVector<f64>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let h = 1e-6 * x[i].abs().max(1.0);
        let (lo, hi) = (self.feasible_set.lo[i], self.feasible_set.hi[i]);
        let mut plus = x.clone();
        let mut minus = x.clone();
        let up = x[i] + h <= hi;
        let down = x[i] - h >= lo;
        match (up, down) {
            (true, true) | (false, false) => {
                plus[i] += h;
                minus[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            }
            (true, false) => {
                plus[i] += h;
                (eval(&plus) - eval(x)) / h
            }
            (false, true) => {
                minus[i] -= h;
                (eval(x) - eval(&minus)) / h
            }
        }
    }

    /// Largest observed ratio `|g_k(y) - g_k(x)| / ||y - x||` over random pairs
    /// in `X` (clipped to `radius`). A valid `beta` is at least this value.
    pub fn lipschitz_spot_check(&self, samples: usize, radius: f64, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let x = self.feasible_set.sample(&mut rng, radius);
            let y = self.feasible_set.sample(&mut rng, radius);
            let dist = (&y - &x).norm();
            if dist == 0.0 {
                continue;
            }
            let (gx, gy) = (self.g(&x), self.g(&y));
            for k in 0..self.m {
                let ratio = (gy[k] - gx[k]).abs() / dist;
                if ratio.is_finite() {
                    worst = worst.max(ratio);
                }
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_program() -> ProgramSpec {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let b = DVector::from_vec(vec![-2.0, -1.0]);
        ProgramSpec::with_linear_constraints(
            2,
            Arc::new(|x| x.norm_squared()),
            Arc::new(|x| 2.0 * x),
            a,
            b,
            BoxSet::unbounded(2),
            2.0,
            2f64.sqrt(),
        )
        .unwrap()
    }

    #[test]
    fn rejects_bad_moduli_and_dims() {
        let f: ScalarFn = Arc::new(|x| x.norm_squared());
        let g: VectorFn = Arc::new(|x| DVector::from_element(1, x[0]));
        assert!(
            ProgramSpec::new(1, 1, f.clone(), g.clone(), BoxSet::unbounded(1), 0.0, 1.0).is_err()
        );
        assert!(
            ProgramSpec::new(1, 1, f.clone(), g.clone(), BoxSet::unbounded(1), 1.0, -1.0).is_err()
        );
        assert!(
            ProgramSpec::new(1, 0, f.clone(), g.clone(), BoxSet::unbounded(1), 1.0, 1.0).is_err()
        );
        assert!(ProgramSpec::new(2, 1, f, g, BoxSet::unbounded(1), 1.0, 1.0).is_err());
    }

    #[test]
    fn box_rejects_inverted_bounds() {
        let lo = DVector::from_vec(vec![0.0, 2.0]);
        let hi = DVector::from_vec(vec![1.0, 1.0]);
        assert!(BoxSet::new(lo, hi).is_err());
    }

    #[test]
    fn box_projection_and_center() {
        let b = BoxSet::new(
            DVector::from_vec(vec![0.0, f64::NEG_INFINITY]),
            DVector::from_vec(vec![4.0, 3.0]),
        )
        .unwrap();
        let p = b.project(&DVector::from_vec(vec![-1.0, 7.0]));
        assert_eq!(p.as_slice(), &[0.0, 3.0]);
        assert_eq!(b.center().as_slice(), &[2.0, 0.0]);
        assert!(b.contains(&p, 0.0));
    }

    #[test]
    fn finite_difference_gradients_match_analytic() {
        let p = quad_program();
        let f: ScalarFn = Arc::new(|x| x.norm_squared());
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let g: VectorFn = Arc::new(move |x| &a * x);
        let fd = ProgramSpec::new(2, 2, f, g, BoxSet::unbounded(2), 2.0, 2f64.sqrt()).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.7]);
        assert!((p.grad_f(&x) - fd.grad_f(&x)).norm() < 1e-6);
        assert!((p.jac_g(&x) - fd.jac_g(&x)).norm() < 1e-6);
    }

    #[test]
    fn lipschitz_spot_check_respects_row_norm() {
        let p = quad_program();
        let ratio = p.lipschitz_spot_check(500, 10.0, 7);
        assert!(ratio <= p.beta() + 1e-12);
        assert!(ratio > 0.5);
    }
}
