//! Ground-truth solutions by KKT active-set enumeration.
//!
//! Used only to check the iterative solvers, so it shares no code path with
//! them. Subsets are tried by increasing cardinality, lexicographically within
//! a cardinality; the first candidate that is primal feasible with
//! nonnegative multipliers is optimal by convexity.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::numerical_rank;
use crate::error::{Error, Result};
use crate::oracles::{NumInstance, QpInstance};

pub const MAX_ENUMERATED_CONSTRAINTS: usize = 20;

const FEAS_TOL: f64 = 1e-8;
const NEWTON_TOL: f64 = 1e-10;
const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 60;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktSolution {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    pub lambda_star: DVector<f64>,
    /// Constraints with `|g_k(x*)| <= 1e-8`, zero-based.
    pub active_set: Vec<usize>,
}

impl KktSolution {
    pub fn lambda_norm(&self) -> f64 {
        self.lambda_star.norm()
    }
}

/// All subsets of `0..m` ordered by size, then lexicographically.
fn subsets_by_cardinality(m: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..=m).flat_map(move |k| Combinations::new(m, k))
}

struct Combinations {
    m: usize,
    idx: Vec<usize>,
    done: bool,
}

impl Combinations {
    fn new(m: usize, k: usize) -> Self {
        Self {
            m,
            idx: (0..k).collect(),
            done: k > m,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let k = self.idx.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.idx[i] < self.m - k + i {
                self.idx[i] += 1;
                for j in i + 1..k {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

fn rows(a: &DMatrix<f64>, set: &[usize]) -> DMatrix<f64> {
    a.select_rows(set.iter())
}

fn active_constraints(residual: &DVector<f64>, b: &DVector<f64>) -> Vec<usize> {
    (0..residual.len())
        .filter(|&k| residual[k].abs() <= FEAS_TOL * (1.0 + b[k].abs()))
        .collect()
}

/// Picks a single multiplier from `{lambda >= 0 : M lambda = r}`.
///
/// When `M` has full column rank the set is a point and `vertex` is returned.
/// Otherwise the result is the analytic center of the set (maximizer of
/// `sum log lambda_k`), found by infeasible-start Newton; if the set has no
/// strictly positive point the vertex is kept.
fn select_multiplier(m: &DMatrix<f64>, r: &DVector<f64>, vertex: DVector<f64>) -> DVector<f64> {
    if vertex.is_empty() || numerical_rank(m) == m.ncols() {
        return vertex;
    }
    analytic_center(m, r, &vertex).unwrap_or(vertex)
}

fn analytic_center(
    m: &DMatrix<f64>,
    r: &DVector<f64>,
    start: &DVector<f64>,
) -> Option<DVector<f64>> {
    // Replace M lambda = r by an equivalent full-row-rank system.
    let svd = m.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > 1e-10 * smax)
        .collect();
    let u = svd.u?.select_columns(keep.iter());
    let eq = u.tr_mul(m);
    let rhs = u.tr_mul(r);
    let (p, l) = eq.shape();

    let scale = start.amax().max(1e-3);
    let mut lambda = start.map(|v| v.max(0.0) + 0.1 * scale);
    let mut nu = DVector::zeros(p);
    let residual = |lambda: &DVector<f64>, nu: &DVector<f64>| {
        let dual = -lambda.map(|v| 1.0 / v) + eq.tr_mul(nu);
        let primal = &eq * lambda - &rhs;
        (dual.norm_squared() + primal.norm_squared()).sqrt()
    };

    for _ in 0..MAX_NEWTON {
        let grad = -lambda.map(|v| 1.0 / v);
        let primal = &eq * &lambda - &rhs;
        let mut kkt = DMatrix::zeros(l + p, l + p);
        for i in 0..l {
            kkt[(i, i)] = 1.0 / (lambda[i] * lambda[i]);
        }
        kkt.view_mut((0, l), (l, p)).copy_from(&eq.transpose());
        kkt.view_mut((l, 0), (p, l)).copy_from(&eq);
        let mut b = DVector::zeros(l + p);
        b.rows_mut(0, l).copy_from(&(-&grad));
        b.rows_mut(l, p).copy_from(&(-&primal));
        let sol = kkt.lu().solve(&b)?;
        let d_lambda = sol.rows(0, l).into_owned();
        let d_nu = sol.rows(l, p).into_owned() - &nu;

        let r0 = residual(&lambda, &nu);
        if r0 <= 1e-12 * (1.0 + rhs.norm()) {
            return Some(lambda);
        }
        let mut step = 1.0;
        let mut ok = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &lambda + step * &d_lambda;
            if cand.iter().all(|v| *v > 0.0) {
                let cand_nu = &nu + step * &d_nu;
                if residual(&cand, &cand_nu) <= (1.0 - 0.01 * step) * r0 {
                    lambda = cand;
                    nu = cand_nu;
                    ok = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !ok {
            let primal = (&eq * &lambda - &rhs).norm();
            return (primal <= 1e-10 * (1.0 + rhs.norm())).then_some(lambda);
        }
    }
    let primal = (&eq * &lambda - &rhs).norm();
    (primal <= 1e-10 * (1.0 + rhs.norm())).then_some(lambda)
}

/// Exact solution of a small QP by enumerating active sets.
pub fn kkt_solve_qp(inst: &QpInstance) -> Result<KktSolution> {
    let (m, n) = (inst.m(), inst.n());
    if m > MAX_ENUMERATED_CONSTRAINTS {
        return Err(Error::Precondition(format!(
            "active-set enumeration supports at most {MAX_ENUMERATED_CONSTRAINTS} constraints, got {m}"
        )));
    }
    let two_p = 2.0 * &inst.p;
    for set in subsets_by_cardinality(m) {
        let k = set.len();
        let a_s = rows(&inst.a, &set);
        if k > 0 && numerical_rank(&a_s) < k {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&two_p);
        if k > 0 {
            kkt.view_mut((0, n), (n, k)).copy_from(&a_s.transpose());
            kkt.view_mut((n, 0), (k, n)).copy_from(&a_s);
        }
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&inst.c));
        for (j, &row) in set.iter().enumerate() {
            rhs[n + j] = inst.b[row];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else {
            continue;
        };
        let x = sol.rows(0, n).into_owned();
        let lambda_s = sol.rows(n, k).into_owned();
        if lambda_s.iter().any(|l| *l < -FEAS_TOL) {
            continue;
        }
        let slack = &inst.a * &x - &inst.b;
        if (0..m).any(|j| slack[j] > FEAS_TOL * (1.0 + inst.b[j].abs())) {
            continue;
        }

        let active = active_constraints(&slack, &inst.b);
        let mut vertex = DVector::zeros(active.len());
        for (j, &row) in set.iter().enumerate() {
            let pos = active
                .iter()
                .position(|r| *r == row)
                .expect("subset rows are active");
            vertex[pos] = lambda_s[j].max(0.0);
        }
        let jac_t = rows(&inst.a, &active).transpose();
        let stationarity_rhs = -(&two_p * &x + &inst.c);
        let chosen = select_multiplier(&jac_t, &stationarity_rhs, vertex);
        let mut lambda = DVector::zeros(m);
        for (pos, &row) in active.iter().enumerate() {
            lambda[row] = chosen[pos];
        }
        return Ok(KktSolution {
            f_star: inst.objective(&x),
            x_star: x,
            lambda_star: lambda,
            active_set: active,
        });
    }
    Err(Error::Infeasible(
        "no active set yields a feasible KKT point".into(),
    ))
}

/// Exact solution of a NUM instance whose optimum is interior to the rate box.
pub fn kkt_solve_num(inst: &NumInstance) -> Result<KktSolution> {
    kkt_solve_num_from(inst, 1.0)
}

/// As [`kkt_solve_num`], starting each Newton solve from `lambda_S = start`.
pub fn kkt_solve_num_from(inst: &NumInstance, start: f64) -> Result<KktSolution> {
    let (m, n) = (inst.m(), inst.n());
    if m > MAX_ENUMERATED_CONSTRAINTS {
        return Err(Error::Precondition(format!(
            "active-set enumeration supports at most {MAX_ENUMERATED_CONSTRAINTS} constraints, got {m}"
        )));
    }
    if !(start > 0.0) {
        return Err(Error::Invalid(format!(
            "Newton start must be positive, got {start}"
        )));
    }
    for set in subsets_by_cardinality(m).filter(|s| !s.is_empty()) {
        let a_s = rows(&inst.a, &set);
        // Every flow needs a priced link, otherwise its rate is unbounded.
        if (0..n).any(|i| a_s.column(i).iter().all(|v| *v == 0.0)) {
            continue;
        }
        let b_s = DVector::from_iterator(set.len(), set.iter().map(|&k| inst.b[k]));
        let Some(lambda_s) = newton_link_prices(&inst.c, &a_s, &b_s, start) else {
            continue;
        };
        let load = a_s.tr_mul(&lambda_s);
        let x = inst.c.zip_map(&load, |c, l| c / l);
        if x.iter()
            .zip(inst.xmax.iter())
            .any(|(x, cap)| !(*x > 0.0 && x < cap))
        {
            continue;
        }
        let slack = &inst.a * &x - &inst.b;
        if (0..m).any(|j| slack[j] > FEAS_TOL * (1.0 + inst.b[j].abs())) {
            continue;
        }

        let active = active_constraints(&slack, &inst.b);
        let mut vertex = DVector::zeros(active.len());
        for (j, &row) in set.iter().enumerate() {
            let pos = active
                .iter()
                .position(|r| *r == row)
                .expect("subset rows are active");
            vertex[pos] = lambda_s[j];
        }
        let jac_t = rows(&inst.a, &active).transpose();
        let stationarity_rhs = inst.c.zip_map(&x, |c, x| c / x);
        let chosen = select_multiplier(&jac_t, &stationarity_rhs, vertex);
        let mut lambda = DVector::zeros(m);
        for (pos, &row) in active.iter().enumerate() {
            lambda[row] = chosen[pos];
        }
        return Ok(KktSolution {
            f_star: inst.objective(&x),
            x_star: x,
            lambda_star: lambda,
            active_set: active,
        });
    }
    Err(Error::Numerical(
        "Newton iteration failed to produce a feasible KKT point on every active set".into(),
    ))
}

/// Maximizes `phi(lambda) = sum_i c_i log(lambda . a_i) - lambda . b` over
/// `lambda > 0`; its stationarity condition is `sum_i c_i a_i / (lambda . a_i) = b`.
/// Returns `None` unless the gradient norm reaches the Newton tolerance.
fn newton_link_prices(
    c: &DVector<f64>,
    a_s: &DMatrix<f64>,
    b_s: &DVector<f64>,
    start: f64,
) -> Option<DVector<f64>> {
    let k = a_s.nrows();
    let phi = |lambda: &DVector<f64>| -> f64 {
        let load = a_s.tr_mul(lambda);
        c.zip_map(&load, |c, l| c * l.ln()).sum() - lambda.dot(b_s)
    };
    let mut lambda = DVector::from_element(k, start);
    for _ in 0..MAX_NEWTON {
        let load = a_s.tr_mul(&lambda);
        let weights = c.zip_map(&load, |c, l| c / l);
        let grad = a_s * &weights - b_s;
        if grad.norm() <= NEWTON_TOL {
            return Some(lambda);
        }
        let curv = c.zip_map(&load, |c, l| c / (l * l));
        let neg_hess = a_s * DMatrix::from_diagonal(&curv) * a_s.transpose();
        let dir = Cholesky::new(neg_hess)?.solve(&grad);
        let slope = grad.dot(&dir);
        let base = phi(&lambda);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..MAX_HALVINGS {
            let cand = &lambda + step * &dir;
            if cand.iter().all(|v| *v > 0.0)
                && phi(&cand) >= base + 1e-4 * step * slope - 1e-15 * base.abs()
            {
                lambda = cand;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved {
            return None;
        }
    }
    let load = a_s.tr_mul(&lambda);
    let grad = a_s * c.zip_map(&load, |c, l| c / l) - b_s;
    (grad.norm() <= NEWTON_TOL).then_some(lambda)
}
