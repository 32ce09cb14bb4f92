//! Python module `driftopt`: problems, solver runs, reference solutions, rate
//! fits and bound audits.

use driftopt::diagnostics::{self, error_series, fit_in_window, log_tail_window, RateModel};
use driftopt::dual::dual_value_and_gradient;
use driftopt::error::Error;
use driftopt::problems::{self, BuiltinTag, ProblemBundle};
use driftopt::reference::KktSolution;
use driftopt::solver::{self, Sampling, SolverConfig, Variant};
use driftopt::trace::IterateTrace;
use nalgebra::DVector;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::Numerical(_)
        | Error::NotConverged { .. }
        | Error::Infeasible(_)
        | Error::Oracle { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Reference primal-dual solution.
#[pyclass(frozen, skip_from_py_object, name = "KktSolution", module = "driftopt")]
#[derive(Clone)]
pub struct PyKkt {
    #[pyo3(get)]
    x_star: Vec<f64>,
    #[pyo3(get)]
    f_star: f64,
    #[pyo3(get)]
    lambda_star: Vec<f64>,
    /// Zero-based indices of the constraints tight at `x_star`.
    #[pyo3(get)]
    active_set: Vec<usize>,
}

impl From<&KktSolution> for PyKkt {
    fn from(r: &KktSolution) -> Self {
        Self {
            x_star: vec(&r.x_star),
            f_star: r.f_star,
            lambda_star: vec(&r.lambda_star),
            active_set: r.active_set.clone(),
        }
    }
}

#[pymethods]
impl PyKkt {
    fn __repr__(&self) -> String {
        format!(
            "KktSolution(x_star={:?}, f_star={}, lambda_star={:?}, active_set={:?})",
            self.x_star, self.f_star, self.lambda_star, self.active_set
        )
    }
}

/// A constrained program with its oracle, constants and reference solution.
#[pyclass(frozen, name = "Problem", module = "driftopt")]
pub struct PyProblem {
    bundle: ProblemBundle,
}

#[pymethods]
impl PyProblem {
    /// One of `builtin_tags()`.
    #[staticmethod]
    fn builtin(tag: &str) -> PyResult<Self> {
        let bundle = problems::builtin_by_name(tag).map_err(to_py)?;
        Ok(Self { bundle })
    }

    #[staticmethod]
    #[pyo3(signature = (text, tag = "problem"))]
    fn from_json(text: &str, tag: &str) -> PyResult<Self> {
        let bundle = problems::parse_problem(text, tag).map_err(to_py)?;
        Ok(Self { bundle })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bundle = problems::load_problem(path).map_err(to_py)?;
        Ok(Self { bundle })
    }

    fn to_json(&self) -> PyResult<String> {
        self.bundle.to_json().map_err(to_py)
    }

    #[getter]
    fn tag(&self) -> String {
        self.bundle.tag.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.bundle.program.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.bundle.program.m()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.bundle.constants.alpha.value
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.bundle.constants.beta.value
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.bundle.constants.gamma.value
    }

    /// Constants with provenance, as JSON.
    fn constants_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.bundle.constants)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// `max(m beta^2 / alpha, gamma)`.
    fn recommended_v(&self) -> f64 {
        solver::choose_v(
            &self.bundle.program,
            Some(self.bundle.constants.gamma.value),
        )
    }

    #[getter]
    fn reference(&self) -> Option<PyKkt> {
        self.bundle.reference.as_ref().map(PyKkt::from)
    }

    fn objective(&self, x: Vec<f64>) -> PyResult<f64> {
        let x = self.point(x)?;
        Ok(self.bundle.program.f(&x))
    }

    fn constraints(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = self.point(x)?;
        Ok(vec(&self.bundle.program.g(&x)))
    }

    /// `(q(lambda), grad q(lambda))`.
    fn dual(&self, multiplier: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        let lam = DVector::from_vec(multiplier);
        let (q, g) =
            dual_value_and_gradient(&self.bundle.program, self.bundle.oracle.as_ref(), &lam)
                .map_err(to_py)?;
        Ok((q, vec(&g)))
    }

    /// Minimizer of `V f(x) + q . g(x)` over the feasible box.
    fn argmin(&self, queue: Vec<f64>, v: f64) -> PyResult<Vec<f64>> {
        let x = self
            .bundle
            .oracle
            .argmin(&DVector::from_vec(queue), v)
            .map_err(to_py)?;
        Ok(vec(&x))
    }

    fn __repr__(&self) -> String {
        format!(
            "Problem(tag={:?}, n={}, m={})",
            self.bundle.tag,
            self.n(),
            self.m()
        )
    }
}

impl PyProblem {
    fn point(&self, x: Vec<f64>) -> PyResult<DVector<f64>> {
        if x.len() != self.bundle.program.n() {
            return Err(PyValueError::new_err(format!(
                "point has {} entries, problem has {} variables",
                x.len(),
                self.bundle.program.n()
            )));
        }
        Ok(DVector::from_vec(x))
    }
}

/// Sampled history of one solver run.
#[pyclass(frozen, name = "Trace", module = "driftopt")]
pub struct PyTrace {
    trace: IterateTrace,
    config: SolverConfig,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn t(&self) -> Vec<usize> {
        self.trace.indices().collect()
    }

    #[getter]
    fn f_avg(&self) -> Vec<f64> {
        self.trace.samples().iter().map(|s| s.f_avg).collect()
    }

    #[getter]
    fn g_avg(&self) -> Vec<Vec<f64>> {
        self.trace.samples().iter().map(|s| vec(&s.g_avg)).collect()
    }

    #[getter]
    fn x_avg(&self) -> Vec<Vec<f64>> {
        self.trace.samples().iter().map(|s| vec(&s.x_avg)).collect()
    }

    #[getter]
    fn queue(&self) -> Vec<Vec<f64>> {
        self.trace.samples().iter().map(|s| vec(&s.queue)).collect()
    }

    #[getter]
    fn queue_norm(&self) -> Vec<f64> {
        self.trace.samples().iter().map(|s| s.queue_norm).collect()
    }

    #[getter]
    fn dual_value(&self) -> Vec<f64> {
        self.trace.samples().iter().map(|s| s.dual_value).collect()
    }

    #[getter]
    fn lambda_dist(&self) -> Vec<Option<f64>> {
        self.trace.samples().iter().map(|s| s.lambda_dist).collect()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.trace.iterations
    }

    #[getter]
    fn v(&self) -> f64 {
        self.config.v
    }

    #[getter]
    fn max_drift_residual(&self) -> f64 {
        self.trace.steps.max_drift_residual
    }

    /// `(t, |f(x̄) - f*|, max_k max(g_k(x̄), 0))` against the problem's reference.
    fn error_series(&self, problem: &PyProblem) -> PyResult<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        let r = problem.bundle.reference().map_err(to_py)?;
        let s = error_series(&self.trace, r);
        Ok((s.t, s.objective, s.constraint))
    }

    /// Checks every applicable convergence bound; `gamma` defaults to the
    /// problem's dual smoothness modulus.
    #[pyo3(signature = (problem, gamma = None))]
    fn audit(&self, problem: &PyProblem, gamma: Option<f64>) -> PyResult<PyAuditReport> {
        let b = &problem.bundle;
        let r = b.reference().map_err(to_py)?;
        let gamma = gamma.unwrap_or(b.constants.gamma.value);
        let report =
            diagnostics::audit_bounds(&self.trace, r, &b.program, &self.config, Some(gamma))
                .map_err(to_py)?;
        Ok(PyAuditReport {
            all_pass: report.all_pass,
            entries: report
                .entries
                .into_iter()
                .map(|e| PyAuditEntry {
                    name: e.name,
                    applicable: e.applicable,
                    worst_margin: e.worst_margin,
                    passed: e.pass,
                    note: e.note,
                })
                .collect(),
        })
    }

    fn __len__(&self) -> usize {
        self.trace.len()
    }
}

#[pyclass(frozen, skip_from_py_object, name = "AuditEntry", module = "driftopt")]
#[derive(Clone)]
pub struct PyAuditEntry {
    #[pyo3(get)]
    name: String,
    #[pyo3(get)]
    applicable: bool,
    #[pyo3(get)]
    worst_margin: Option<f64>,
    #[pyo3(get)]
    passed: bool,
    #[pyo3(get)]
    note: Option<String>,
}

#[pymethods]
impl PyAuditEntry {
    fn __repr__(&self) -> String {
        format!(
            "AuditEntry(name={:?}, applicable={}, passed={}, worst_margin={:?})",
            self.name, self.applicable, self.passed, self.worst_margin
        )
    }
}

#[pyclass(frozen, name = "AuditReport", module = "driftopt")]
pub struct PyAuditReport {
    #[pyo3(get)]
    all_pass: bool,
    #[pyo3(get)]
    entries: Vec<PyAuditEntry>,
}

#[pymethods]
impl PyAuditReport {
    fn get(&self, name: &str) -> Option<PyAuditEntry> {
        self.entries.iter().find(|e| e.name == name).cloned()
    }
}

#[pyclass(frozen, name = "RateFit", module = "driftopt")]
pub struct PyRateFit {
    #[pyo3(get)]
    model: String,
    #[pyo3(get)]
    rate: f64,
    #[pyo3(get)]
    constant: f64,
    #[pyo3(get)]
    quality: f64,
    #[pyo3(get)]
    window: (f64, f64),
    #[pyo3(get)]
    samples: usize,
}

#[pymethods]
impl PyRateFit {
    fn __repr__(&self) -> String {
        format!(
            "RateFit(model={:?}, rate={}, constant={}, quality={}, window={:?}, samples={})",
            self.model, self.rate, self.constant, self.quality, self.window, self.samples
        )
    }
}

/// Initial queues: one value for every constraint or a full vector.
#[derive(FromPyObject)]
enum QueueInit {
    Scalar(f64),
    Vector(Vec<f64>),
}

/// Runs `iters` iterations. `v` defaults to `Problem.recommended_v()`.
#[pyfunction]
#[pyo3(signature = (problem, iters, algorithm = "dpp", v = None, q0 = None, sampling = "log", step = None))]
fn solve(
    problem: &PyProblem,
    iters: usize,
    algorithm: &str,
    v: Option<f64>,
    q0: Option<QueueInit>,
    sampling: &str,
    step: Option<f64>,
) -> PyResult<PyTrace> {
    let b = &problem.bundle;
    let m = b.program.m();
    let variant: Variant = algorithm.parse().map_err(to_py)?;
    let sampling: Sampling = sampling.parse().map_err(to_py)?;
    let gamma = Some(b.constants.gamma.value);
    let v = v.unwrap_or_else(|| solver::choose_v(&b.program, gamma));
    let q0 = match q0 {
        None => DVector::zeros(m),
        Some(QueueInit::Scalar(q)) => DVector::from_element(m, q),
        Some(QueueInit::Vector(q)) => DVector::from_vec(q),
    };
    let mut config = SolverConfig::new(v, m, iters, variant)
        .with_q0(q0)
        .with_sampling(sampling);
    if let Some(step) = step {
        config = config.with_step(step);
    }
    solver::warn_if_small_v(&b.program, v, gamma);
    let trace =
        solver::run(&b.program, b.oracle.as_ref(), &config, b.reference.as_ref()).map_err(to_py)?;
    Ok(PyTrace { trace, config })
}

/// Fits `e(t) ≈ C t^-p` (`"power"`) or `e(t) ≈ (C/t) r^t` (`"geometric"`).
/// Without an explicit `window` the last `window_fraction` of log-time is used.
#[pyfunction]
#[pyo3(signature = (t, errors, model, window = None, window_fraction = 0.5, floor = 0.0))]
fn fit_rate(
    t: Vec<f64>,
    errors: Vec<f64>,
    model: &str,
    window: Option<(f64, f64)>,
    window_fraction: f64,
    floor: f64,
) -> PyResult<PyRateFit> {
    if t.len() != errors.len() {
        return Err(PyValueError::new_err(format!(
            "t has {} entries, errors has {}",
            t.len(),
            errors.len()
        )));
    }
    let model: RateModel = model.parse().map_err(to_py)?;
    let series: Vec<(f64, f64)> = t.into_iter().zip(errors).collect();
    let window = match window {
        Some((lo, hi)) => [lo, hi],
        None => log_tail_window(&series, window_fraction).map_err(to_py)?,
    };
    let fit = fit_in_window(&series, model, window, floor).map_err(to_py)?;
    Ok(PyRateFit {
        model: match fit.model {
            RateModel::Power => "power",
            RateModel::Geometric => "geometric",
        }
        .to_string(),
        rate: fit.rate,
        constant: fit.constant,
        quality: fit.quality,
        window: (fit.window[0], fit.window[1]),
        samples: fit.samples,
    })
}

#[pyfunction]
fn kkt(problem: &PyProblem) -> PyResult<PyKkt> {
    problem.bundle.reference().map(PyKkt::from).map_err(to_py)
}

#[pyfunction]
fn builtin_tags() -> Vec<&'static str> {
    BuiltinTag::ALL.iter().map(BuiltinTag::as_str).collect()
}

#[pymodule(name = "driftopt")]
pub fn driftopt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_class::<PyKkt>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyAuditReport>()?;
    m.add_class::<PyAuditEntry>()?;
    m.add_class::<PyRateFit>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rate, m)?)?;
    m.add_function(wrap_pyfunction!(kkt, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_tags, m)?)?;
    Ok(())
}
