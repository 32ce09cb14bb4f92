//! Dual function `q(lambda) = min_x f(x) + lambda . g(x)`: values, gradients,
//! Hessians, moduli, rank conditions and the convergence threshold formulas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracles::{InnerOracle, NumInstance};
use crate::program::ProgramSpec;

/// Dual quantities at one multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualReport {
    pub lambda: DVector<f64>,
    pub q_value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
    pub gamma: f64,
    /// Smallest eigenvalue of `-hessian`, when the Hessian is negative definite.
    pub lc_estimate: Option<f64>,
    pub qualification: Qualification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qualification {
    /// The active rows are linearly independent.
    pub locally_quadratic: bool,
    /// The whole constraint matrix has full row rank.
    pub strongly_concave: bool,
}

/// `(q(lambda), grad q(lambda)) = (f(x) + lambda . g(x), g(x))` with `x` the
/// oracle minimizer of `f + lambda . g`.
pub fn dual_value_and_gradient(
    program: &ProgramSpec,
    oracle: &dyn InnerOracle,
    lambda: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    if lambda.len() != program.m() {
        return Err(Error::dim("multiplier", program.m(), lambda.len()));
    }
    if lambda.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Invalid("multipliers must be nonnegative".into()));
    }
    let x = oracle.argmin(lambda, 1.0)?;
    let g = program.g(&x);
    Ok((program.f(&x) + lambda.dot(&g), g))
}

/// Lipschitz modulus `c_h^2 / sigma_F` of the dual gradient, where `sigma_F`
/// is the strong-convexity modulus of `f` and `c_h` bounds the constraint
/// Jacobian norm.
pub fn smoothness_modulus(sigma_f: f64, c_h: f64) -> Result<f64> {
    if !(sigma_f > 0.0) || !(c_h > 0.0) {
        return Err(Error::Invalid(format!(
            "sigma_F and c_h must be positive (got {sigma_f}, {c_h})"
        )));
    }
    Ok(c_h * c_h / sigma_f)
}

/// `-sum_i c_i a_i a_i^T / (lambda . a_i)^2`, valid where no rate cap binds.
pub fn num_dual_hessian(inst: &NumInstance, lambda: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = inst.m();
    if lambda.len() != m {
        return Err(Error::dim("multiplier", m, lambda.len()));
    }
    let mut h = DMatrix::zeros(m, m);
    for i in 0..inst.n() {
        let a_i = inst.a.column(i);
        let load = a_i.dot(lambda);
        if !(load > 0.0) {
            return Err(Error::Domain(format!(
                "flow {i} has zero price (lambda . a_{i} = 0)"
            )));
        }
        h -= (inst.c[i] / (load * load)) * (a_i * a_i.transpose());
    }
    Ok(h)
}

/// `-G [H_f + sum_k lambda_k H_gk]^{-1} G^T` with `G` the `m x n` constraint
/// Jacobian at the primal minimizer. `hess_g` may be empty for linear
/// constraints.
pub fn general_dual_hessian(
    grad_g: &DMatrix<f64>,
    hess_f: &DMatrix<f64>,
    hess_g: &[DMatrix<f64>],
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let (m, n) = grad_g.shape();
    if hess_f.shape() != (n, n) {
        return Err(Error::dim("objective Hessian", n, hess_f.nrows()));
    }
    if lambda.len() != m {
        return Err(Error::dim("multiplier", m, lambda.len()));
    }
    if !hess_g.is_empty() && hess_g.len() != m {
        return Err(Error::dim("constraint Hessians", m, hess_g.len()));
    }
    let mut inner = hess_f.clone();
    for (k, h) in hess_g.iter().enumerate() {
        if h.shape() != (n, n) {
            return Err(Error::dim("constraint Hessian", n, h.nrows()));
        }
        inner += lambda[k] * h;
    }
    let sym = 0.5 * (&inner + inner.transpose());
    let min_eig = sym.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(Error::Domain(format!(
            "Lagrangian Hessian is not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    let chol = sym
        .cholesky()
        .ok_or_else(|| Error::Domain("Lagrangian Hessian Cholesky failed".into()))?;
    let solved = chol.solve(&grad_g.transpose());
    let h = -(grad_g * solved);
    Ok(0.5 * (&h + h.transpose()))
}

/// Singular-value rank with threshold `1e-10 * sigma_max`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > 1e-10 * smax).count()
}

pub fn qualification_check(a_full: &DMatrix<f64>, active_rows: &[usize]) -> Result<Qualification> {
    if a_full.is_empty() {
        return Err(Error::Invalid("constraint matrix is empty".into()));
    }
    if let Some(r) = active_rows.iter().find(|r| **r >= a_full.nrows()) {
        return Err(Error::Invalid(format!(
            "active row {r} out of range for {} rows",
            a_full.nrows()
        )));
    }
    let active = a_full.select_rows(active_rows.iter());
    Ok(Qualification {
        locally_quadratic: numerical_rank(&active) == active_rows.len(),
        strongly_concave: numerical_rank(a_full) == a_full.nrows(),
    })
}

/// Smallest eigenvalue of `-hessian` when every eigenvalue of `hessian` is
/// negative beyond rounding (below `-1e-10` times the largest magnitude).
pub fn lc_estimate(hessian: &DMatrix<f64>) -> Option<f64> {
    let sym = 0.5 * (hessian + hessian.transpose());
    let eig = sym.symmetric_eigenvalues();
    let top = eig.max();
    (top < -1e-10 * eig.amax()).then(|| -top)
}

/// `theta = max{4 V^2 ||lambda0 - lambda*||^2 / (2V - gamma), q(lambda*) - q(lambda0)}`;
/// the dual gap after `t >= 1` iterations is at most `theta / t`.
pub fn theta_bound(
    v: f64,
    gamma: f64,
    lambda0: &DVector<f64>,
    lambda_star: &DVector<f64>,
    q_at_lambda0: f64,
    q_at_star: f64,
) -> Result<f64> {
    if v < gamma {
        return Err(Error::Precondition(format!(
            "V = {v} must be at least gamma = {gamma}"
        )));
    }
    if lambda0.len() != lambda_star.len() {
        return Err(Error::dim(
            "initial multiplier",
            lambda_star.len(),
            lambda0.len(),
        ));
    }
    let dist2 = (lambda0 - lambda_star).norm_squared();
    Ok((4.0 * v * v * dist2 / (2.0 * v - gamma)).max(q_at_star - q_at_lambda0))
}

/// Iteration counts after which the multipliers stay inside the locally
/// quadratic (`T_q`) and locally strongly concave (`T_c`) neighborhoods.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub tq: f64,
    pub tc: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn tq_tc_thresholds(
    v: f64,
    gamma: f64,
    lambda0_dist: f64,
    dual_gap0: f64,
    dq: f64,
    lq: f64,
    dc: f64,
    lc: f64,
) -> Result<Thresholds> {
    for (name, val) in [
        ("V", v),
        ("gamma", gamma),
        ("D_q", dq),
        ("L_q", lq),
        ("D_c", dc),
        ("L_c", lc),
    ] {
        if !(val > 0.0) {
            return Err(Error::Invalid(format!(
                "{name} must be positive, got {val}"
            )));
        }
    }
    if lambda0_dist < 0.0 || dual_gap0 < 0.0 {
        return Err(Error::Invalid(
            "distance and dual gap must be nonnegative".into(),
        ));
    }
    if v < gamma {
        return Err(Error::Precondition(format!(
            "V = {v} must be at least gamma = {gamma}"
        )));
    }
    let denom = 2.0 * v - gamma;
    let tq = (4.0 * v * v * lambda0_dist / (denom * lq * dq * dq)).max(dual_gap0 / (lq * dq * dq));
    let tc =
        (8.0 * v * v * lambda0_dist / (denom * lc * dc * dc)).max(2.0 * dual_gap0 / (lc * dc * dc));
    Ok(Thresholds { tq, tc })
}

/// `gamma >= L_c` up to `1e-12`; a smooth and strongly concave function must
/// satisfy it, so failure flags inconsistent moduli.
pub fn gamma_geq_lc_check(gamma: f64, lc: f64) -> bool {
    gamma >= lc - 1e-12
}

/// Assembles a [`DualReport`] for a program with linear constraints `A x <= b`.
pub fn dual_report(
    program: &ProgramSpec,
    oracle: &dyn InnerOracle,
    a: &DMatrix<f64>,
    lambda: &DVector<f64>,
    hessian: Option<DMatrix<f64>>,
    gamma: f64,
    active_rows: &[usize],
) -> Result<DualReport> {
    let (q_value, gradient) = dual_value_and_gradient(program, oracle, lambda)?;
    let lc = hessian.as_ref().and_then(lc_estimate);
    Ok(DualReport {
        lambda: lambda.clone(),
        q_value,
        gradient,
        hessian,
        gamma,
        lc_estimate: lc,
        qualification: qualification_check(a, active_rows)?,
    })
}
