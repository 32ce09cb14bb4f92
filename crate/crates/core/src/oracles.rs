//! Inner minimization `argmin_{x in X} V f(x) + Q . g(x)`.
//!
//! Two closed forms (log-utility over a box, unconstrained quadratic) and a
//! projected-gradient fallback for any differentiable [`ProgramSpec`].

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::program::{BoxSet, ProgramSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    LogUtilityBox,
    Quadratic,
    ProjectedGradient,
}

/// Exact (or tolerance-bounded) minimizer of the drift-plus-penalty inner
/// problem. `weights` are the queues `Q(t)`; the dual-subgradient form
/// `f + lambda . g` is the call with `weights = lambda` and `v = 1`.
pub trait InnerOracle: Send + Sync {
    fn kind(&self) -> OracleKind;

    fn argmin(&self, weights: &DVector<f64>, v: f64) -> Result<DVector<f64>>;
}

fn check_args(weights: &DVector<f64>, v: f64, m: usize) -> Result<()> {
    if weights.len() != m {
        return Err(Error::dim("queue vector", m, weights.len()));
    }
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::Invalid(format!("V must be positive, got {v}")));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Invalid("queue weights must be nonnegative".into()));
    }
    Ok(())
}

fn max_row_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Network utility maximization `min sum -c_i log x_i  s.t.  A x <= b,
/// 0 <= x <= xmax` with a 0-1 routing matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumInstance {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub xmax: DVector<f64>,
}

impl NumInstance {
    pub fn new(
        c: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        xmax: DVector<f64>,
    ) -> Result<Self> {
        let (m, n) = a.shape();
        if n == 0 || m == 0 {
            return Err(Error::Invalid("routing matrix must be nonempty".into()));
        }
        if c.len() != n {
            return Err(Error::dim("utility weights", n, c.len()));
        }
        if xmax.len() != n {
            return Err(Error::dim("rate caps", n, xmax.len()));
        }
        if b.len() != m {
            return Err(Error::dim("capacities", m, b.len()));
        }
        if c.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("utility weights must be positive".into()));
        }
        if b.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Invalid("capacities must be positive".into()));
        }
        if a.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Invalid(
                "routing matrix entries must be 0 or 1".into(),
            ));
        }
        if let Some(i) = (0..n).find(|&i| a.column(i).iter().all(|v| *v == 0.0)) {
            return Err(Error::Invalid(format!("flow {i} uses no link")));
        }
        let bmax = b.max();
        if let Some((i, x)) = xmax.iter().enumerate().find(|(_, x)| !(**x > bmax)) {
            return Err(Error::Invalid(format!(
                "rate cap {i} = {x} must exceed the largest capacity {bmax}"
            )));
        }
        Ok(Self { c, a, b, xmax })
    }

    pub fn n(&self) -> usize {
        self.a.ncols()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        self.c
            .iter()
            .zip(x.iter())
            .map(|(c, x)| if *x > 0.0 { -c * x.ln() } else { f64::INFINITY })
            .sum()
    }

    pub fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.c.zip_map(x, |c, x| -c / x)
    }

    /// `diag(c_i / x_i^2)`.
    pub fn objective_hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.c.zip_map(x, |c, x| c / (x * x)))
    }

    /// `min_i c_i / xmax_i^2`, the curvature floor of the objective on the box.
    pub fn computed_alpha(&self) -> f64 {
        self.c.zip_map(&self.xmax, |c, x| c / (x * x)).min()
    }

    /// Largest row norm of `A`; each `a_k . x - b_k` is Lipschitz with `||a_k||`.
    pub fn computed_beta(&self) -> f64 {
        max_row_norm(&self.a)
    }

    pub fn program(&self, alpha: f64, beta: f64) -> Result<ProgramSpec> {
        let obj = self.clone();
        let grad = self.clone();
        let set = BoxSet::new(DVector::zeros(self.n()), self.xmax.clone())?;
        ProgramSpec::with_linear_constraints(
            self.n(),
            Arc::new(move |x| obj.objective(x)),
            Arc::new(move |x| grad.objective_grad(x)),
            self.a.clone(),
            self.b.clone(),
            set,
            alpha,
            beta,
        )
    }
}

/// `x_i = clip(c_i V / (Q . a_i), 0, xmax_i)`, with `x_i = xmax_i` when the
/// flow's links carry no queue.
pub fn log_utility_box_argmin(
    inst: &NumInstance,
    q: &DVector<f64>,
    v: f64,
) -> Result<DVector<f64>> {
    check_args(q, v, inst.m())?;
    let load = inst.a.tr_mul(q);
    Ok(DVector::from_iterator(
        inst.n(),
        (0..inst.n()).map(|i| {
            if load[i] > 0.0 {
                (inst.c[i] * v / load[i]).clamp(0.0, inst.xmax[i])
            } else {
                inst.xmax[i]
            }
        }),
    ))
}

#[derive(Clone, Debug)]
pub struct LogUtilityOracle {
    inst: NumInstance,
}

impl LogUtilityOracle {
    pub fn new(inst: NumInstance) -> Self {
        Self { inst }
    }

    pub fn instance(&self) -> &NumInstance {
        &self.inst
    }
}

impl InnerOracle for LogUtilityOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::LogUtilityBox
    }

    fn argmin(&self, weights: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        log_utility_box_argmin(&self.inst, weights, v)
    }
}

/// `min x^T P x + c^T x  s.t.  A x <= b` over `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QpInstance {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl QpInstance {
    pub fn new(p: DMatrix<f64>, c: DVector<f64>, a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        let n = p.nrows();
        if n == 0 || p.ncols() != n {
            return Err(Error::Invalid(format!(
                "P must be square and nonempty, got {}x{}",
                p.nrows(),
                p.ncols()
            )));
        }
        if c.len() != n {
            return Err(Error::dim("linear term", n, c.len()));
        }
        if a.ncols() != n || a.nrows() == 0 {
            return Err(Error::dim("constraint matrix columns", n, a.ncols()));
        }
        if b.len() != a.nrows() {
            return Err(Error::dim("right-hand side", a.nrows(), b.len()));
        }
        if (&p - p.transpose()).amax() > 1e-12 {
            return Err(Error::Invalid("P must be symmetric".into()));
        }
        let inst = Self { p, c, a, b };
        if !(inst.computed_alpha() > 0.0) {
            return Err(Error::Invalid("P must be positive definite".into()));
        }
        Ok(inst)
    }

    pub fn n(&self) -> usize {
        self.p.nrows()
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x)) + self.c.dot(x)
    }

    pub fn objective_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        2.0 * (&self.p * x) + &self.c
    }

    /// Smallest eigenvalue of `2P`.
    pub fn computed_alpha(&self) -> f64 {
        (2.0 * &self.p).symmetric_eigenvalues().min()
    }

    pub fn computed_beta(&self) -> f64 {
        max_row_norm(&self.a)
    }

    pub fn program(&self, alpha: f64, beta: f64) -> Result<ProgramSpec> {
        let obj = self.clone();
        let grad = self.clone();
        ProgramSpec::with_linear_constraints(
            self.n(),
            Arc::new(move |x| obj.objective(x)),
            Arc::new(move |x| grad.objective_grad(x)),
            self.a.clone(),
            self.b.clone(),
            BoxSet::unbounded(self.n()),
            alpha,
            beta,
        )
    }
}

/// Solves `2 V P x = -(V c + A^T Q)` with a cached Cholesky factor of `2P`.
#[derive(Clone, Debug)]
pub struct QuadraticOracle {
    inst: QpInstance,
    factor: Cholesky<f64, Dyn>,
}

impl QuadraticOracle {
    pub fn new(inst: QpInstance) -> Result<Self> {
        let eig = (2.0 * &inst.p).symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 0.0) || hi / lo > 1e12 {
            return Err(Error::Numerical(format!(
                "2P is singular or ill-conditioned (eigenvalues in [{lo:e}, {hi:e}])"
            )));
        }
        let factor = Cholesky::new(2.0 * &inst.p)
            .ok_or_else(|| Error::Numerical("Cholesky factorization of 2P failed".into()))?;
        Ok(Self { inst, factor })
    }

    pub fn instance(&self) -> &QpInstance {
        &self.inst
    }
}

impl InnerOracle for QuadraticOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::Quadratic
    }

    fn argmin(&self, weights: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        check_args(weights, v, self.inst.m())?;
        let rhs = -(&self.inst.c + self.inst.a.tr_mul(weights) / v);
        let x = self.factor.solve(&rhs);
        let residual =
            (2.0 * v * (&self.inst.p * &x) + v * &self.inst.c + self.inst.a.tr_mul(weights)).norm();
        if !(residual <= 1e-9 * (1.0 + weights.norm()) * v.max(1.0)) {
            return Err(Error::Numerical(format!(
                "quadratic inner solve residual {residual:e}"
            )));
        }
        Ok(x)
    }
}

pub const DEFAULT_INNER_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_INNER: usize = 200_000;

/// Projected gradient on `V f + Q . g` over the program's box.
///
/// The first step is `1 / (V L)` with `L` either supplied or estimated by power
/// iteration on finite-difference Hessian-vector products at the start point.
/// A step is accepted only when the local gradient Lipschitz ratio along it is
/// at most the inverse step; otherwise it is shrunk. Stops when the unit-step
/// gradient map `||x - P(x - grad h(x))||` falls below `tol`.
#[derive(Clone, Debug)]
pub struct ProjectedGradientOracle {
    program: ProgramSpec,
    tol: f64,
    max_inner: usize,
    lipschitz: Option<f64>,
}

impl ProjectedGradientOracle {
    pub fn new(program: ProgramSpec) -> Self {
        Self {
            program,
            tol: DEFAULT_INNER_TOL,
            max_inner: DEFAULT_MAX_INNER,
            lipschitz: None,
        }
    }

    pub fn with_tolerance(mut self, tol: f64, max_inner: usize) -> Self {
        self.tol = tol;
        self.max_inner = max_inner;
        self
    }

    /// Gradient Lipschitz constant of `f + (Q/V) . g`, so the first step is
    /// `1 / (V * lipschitz)`.
    pub fn with_lipschitz(mut self, lipschitz: f64) -> Self {
        self.lipschitz = Some(lipschitz);
        self
    }

    fn inner_value(&self, x: &DVector<f64>, q: &DVector<f64>, v: f64) -> f64 {
        v * self.program.f(x) + q.dot(&self.program.g(x))
    }

    fn inner_grad(&self, x: &DVector<f64>, q: &DVector<f64>, v: f64) -> DVector<f64> {
        v * self.program.grad_f(x) + self.program.jac_g(x).tr_mul(q)
    }

    fn estimate_lipschitz(&self, x: &DVector<f64>, q: &DVector<f64>, v: f64) -> f64 {
        let n = x.len();
        let g0 = self.inner_grad(x, q, v);
        let mut dir = DVector::from_element(n, 1.0 / (n as f64).sqrt());
        let mut est = 0.0;
        for _ in 0..30 {
            let eps = 1e-6 * (1.0 + x.norm());
            let hv = (self.inner_grad(&(x + eps * &dir), q, v) - &g0) / eps;
            let norm = hv.norm();
            if !norm.is_finite() || norm == 0.0 {
                break;
            }
            est = norm;
            dir = hv / norm;
        }
        est
    }
}

impl InnerOracle for ProjectedGradientOracle {
    fn kind(&self) -> OracleKind {
        OracleKind::ProjectedGradient
    }

    fn argmin(&self, weights: &DVector<f64>, v: f64) -> Result<DVector<f64>> {
        check_args(weights, v, self.program.m())?;
        let set = self.program.feasible_set();
        let mut x = set.center();
        let lip = match self.lipschitz {
            Some(l) => v * l,
            None => self.estimate_lipschitz(&x, weights, v),
        };
        let mut step = if lip.is_finite() && lip > 0.0 {
            1.0 / lip
        } else {
            1.0
        };

        let mut grad = self.inner_grad(&x, weights, v);
        let mut best = (f64::INFINITY, x.clone());
        for _ in 0..self.max_inner {
            let map = (&x - set.project(&(&x - &grad))).norm();
            if map < best.0 {
                best = (map, x.clone());
            }
            if map <= self.tol {
                return Ok(x);
            }
            let mut accepted = false;
            for _ in 0..80 {
                let trial = set.project(&(&x - step * &grad));
                let dx = &trial - &x;
                let dx_norm = dx.norm();
                if dx_norm == 0.0 {
                    break;
                }
                if !self.inner_value(&trial, weights, v).is_finite() {
                    step *= 0.5;
                    continue;
                }
                let trial_grad = self.inner_grad(&trial, weights, v);
                let local = (&trial_grad - &grad).norm() / dx_norm;
                if local * step <= 1.0 + 1e-12 {
                    x = trial;
                    grad = trial_grad;
                    step = if local > 0.0 {
                        (2.0 * step).min(1.0 / local)
                    } else {
                        2.0 * step
                    };
                    accepted = true;
                    break;
                }
                step = (0.5 * step).min(0.9 / local);
            }
            if !accepted {
                break;
            }
        }
        Err(Error::NotConverged {
            iterations: self.max_inner,
            residual: best.0,
            best: best.1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn num_6_1() -> NumInstance {
        NumInstance::new(
            dv(&[1.0, 2.0, 3.0]),
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]),
            dv(&[10.0, 8.0, 8.0]),
            dv(&[11.0, 11.0, 11.0]),
        )
        .unwrap()
    }

    fn qp_6_2() -> QpInstance {
        QpInstance::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]),
            dv(&[1.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            dv(&[-2.0, -1.0]),
        )
        .unwrap()
    }

    #[test]
    fn log_utility_zero_queue_hits_caps() {
        let inst = num_6_1();
        let x = log_utility_box_argmin(&inst, &DVector::zeros(3), 363.0).unwrap();
        assert_eq!(x, dv(&[11.0, 11.0, 11.0]));
    }

    #[test]
    fn log_utility_scalar_closed_form() {
        let inst = NumInstance::new(
            dv(&[1.0]),
            DMatrix::from_element(1, 1, 1.0),
            dv(&[1.0]),
            dv(&[5.0]),
        )
        .unwrap();
        let x = log_utility_box_argmin(&inst, &dv(&[2.0]), 1.0).unwrap();
        assert_eq!(x, dv(&[0.5]));
    }

    #[test]
    fn log_utility_at_rank_deficient_multiplier() {
        let inst = NumInstance::new(
            dv(&[1.0; 4]),
            DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0,
                ],
            ),
            dv(&[3.0, 7.0, 2.0, 8.0]),
            dv(&[9.0; 4]),
        )
        .unwrap();
        let v = 7.0;
        let q = v * dv(&[0.3858, 0.0903, 0.7833, 0.0805]);
        let x = log_utility_box_argmin(&inst, &q, v).unwrap();
        assert!((x[0] - 0.8553).abs() < 1e-3, "{x}");
    }

    #[test]
    fn num_instance_validation() {
        let a = DMatrix::from_element(1, 1, 1.0);
        // Cap not above the largest capacity.
        assert!(NumInstance::new(dv(&[1.0]), a.clone(), dv(&[5.0]), dv(&[5.0])).is_err());
        assert!(NumInstance::new(dv(&[-1.0]), a.clone(), dv(&[5.0]), dv(&[6.0])).is_err());
        assert!(NumInstance::new(dv(&[1.0]), a.clone(), dv(&[0.0]), dv(&[6.0])).is_err());
        let unused = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(NumInstance::new(dv(&[1.0, 1.0]), unused, dv(&[5.0]), dv(&[6.0, 6.0])).is_err());
        let frac = DMatrix::from_element(1, 1, 0.5);
        assert!(NumInstance::new(dv(&[1.0]), frac, dv(&[5.0]), dv(&[6.0])).is_err());
    }

    #[test]
    fn num_moduli() {
        let inst = num_6_1();
        assert!((inst.computed_alpha() - 1.0 / 121.0).abs() < 1e-15);
        assert!((inst.computed_beta() - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn qp_validation() {
        let a = DMatrix::from_element(1, 1, 1.0);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 5.0]);
        assert!(QpInstance::new(asym, dv(&[0.0, 0.0]), DMatrix::zeros(1, 2), dv(&[0.0])).is_err());
        let indef = DMatrix::from_element(1, 1, -1.0);
        assert!(QpInstance::new(indef, dv(&[0.0]), a, dv(&[0.0])).is_err());
    }

    #[test]
    fn qp_alpha_close_to_reported() {
        let inst = qp_6_2();
        // eigenvalues of P are 3 +- 2 sqrt 2
        assert!((inst.computed_alpha() - 2.0 * (3.0 - 8f64.sqrt())).abs() < 1e-12);
        assert!(inst.computed_alpha() >= 0.34);
    }

    #[test]
    fn quadratic_argmin_identity_case() {
        let inst = QpInstance::new(
            DMatrix::identity(2, 2) * 0.5,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            dv(&[1.0, 1.0]),
        )
        .unwrap();
        let oracle = QuadraticOracle::new(inst).unwrap();
        let x = oracle.argmin(&DVector::zeros(2), 1.0).unwrap();
        assert!(x.norm() < 1e-15);
    }

    #[test]
    fn quadratic_argmin_unconstrained_minimizer() {
        let oracle = QuadraticOracle::new(qp_6_2()).unwrap();
        let x = oracle.argmin(&DVector::zeros(2), 1.0).unwrap();
        assert!((x - dv(&[-1.5, 0.5])).norm() < 1e-12);
    }

    #[test]
    fn quadratic_argmin_at_known_multiplier() {
        // 2 P x* + c + A^T (5, 8) = 0 at x* = (-1, -1).
        let oracle = QuadraticOracle::new(qp_6_2()).unwrap();
        let v = 4.0 / 0.34;
        let x = oracle.argmin(&(v * dv(&[5.0, 8.0])), v).unwrap();
        assert!((x - dv(&[-1.0, -1.0])).norm() < 1e-12);
    }

    #[test]
    fn quadratic_oracle_rejects_ill_conditioned() {
        let p = DMatrix::from_diagonal(&dv(&[1.0, 1e-13]));
        let inst =
            QpInstance::new(p, dv(&[0.0, 0.0]), DMatrix::identity(2, 2), dv(&[1.0, 1.0])).unwrap();
        assert!(matches!(
            QuadraticOracle::new(inst),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn oracles_reject_bad_arguments() {
        let oracle = QuadraticOracle::new(qp_6_2()).unwrap();
        assert!(oracle.argmin(&DVector::zeros(3), 1.0).is_err());
        assert!(oracle.argmin(&DVector::zeros(2), 0.0).is_err());
        assert!(oracle.argmin(&dv(&[-1.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn projected_gradient_matches_quadratic_on_box() {
        let inst = qp_6_2();
        let program = inst.program(0.34, 2f64.sqrt()).unwrap();
        let boxed = ProgramSpec::with_linear_constraints(
            2,
            {
                let i = inst.clone();
                Arc::new(move |x| i.objective(x))
            },
            {
                let i = inst.clone();
                Arc::new(move |x| i.objective_grad(x))
            },
            inst.a.clone(),
            inst.b.clone(),
            BoxSet::new(dv(&[-10.0, -10.0]), dv(&[10.0, 10.0])).unwrap(),
            program.alpha(),
            program.beta(),
        )
        .unwrap();
        let generic = ProjectedGradientOracle::new(boxed);
        let x = generic.argmin(&DVector::zeros(2), 1.0).unwrap();
        assert!((&x - dv(&[-1.5, 0.5])).norm() < 1e-8, "{x}");
    }

    #[test]
    fn projected_gradient_constant_constraints() {
        let f = Arc::new(|x: &DVector<f64>| 0.5 * x.norm_squared());
        let g = Arc::new(|x: &DVector<f64>| DVector::from_element(2, -1.0 + 0.0 * x[0]));
        let program = ProgramSpec::new(3, 2, f, g, BoxSet::unbounded(3), 1.0, 1.0).unwrap();
        let oracle = ProjectedGradientOracle::new(program);
        let x = oracle.argmin(&dv(&[4.0, 9.0]), 2.5).unwrap();
        assert!(x.norm() < 1e-9);
    }

    #[test]
    fn projected_gradient_reports_non_convergence() {
        let inst = qp_6_2();
        let program = inst.program(0.34, 2f64.sqrt()).unwrap();
        let oracle = ProjectedGradientOracle::new(program).with_tolerance(1e-14, 3);
        match oracle.argmin(&DVector::zeros(2), 1.0) {
            Err(Error::NotConverged {
                iterations, best, ..
            }) => {
                assert_eq!(iterations, 3);
                assert_eq!(best.len(), 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
