use driftopt_py::driftopt_py;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn run(code: &std::ffi::CStr) -> PyResult<()> {
    Python::attach(|py| {
        let globals = PyDict::new(py);
        py.run(code, Some(&globals), None)
    })
}

#[test]
fn module_imports_and_runs_in_embedded_interpreter() {
    pyo3::append_to_inittab!(driftopt_py);
    Python::initialize();

    run(c"
import driftopt
qp = driftopt.Problem.builtin('qp_6_2')
assert qp.n == 2 and qp.m == 2
ref = driftopt.kkt(qp)
assert abs(ref.f_star - 8.0) < 1e-9
assert ref.active_set == [0, 1]
tr = driftopt.solve(qp, 2000, q0=0.0, sampling='linear:10')
assert tr.t[0] == 10 and tr.t[-1] == 2000
assert tr.audit(qp).all_pass
num = driftopt.Problem.builtin('num_6_1')
assert driftopt.kkt(num).active_set == [0, 2]
fit = driftopt.fit_rate([float(t) for t in range(1, 101)], [1.0 / t for t in range(1, 101)], 'power')
assert abs(fit.rate - 1.0) < 1e-9
")
    .unwrap();

    let err = run(c"import driftopt; driftopt.solve(driftopt.Problem.builtin('qp_6_2'), 10, algorithm='newton')").unwrap_err();
    Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyValueError>(py)));
}
