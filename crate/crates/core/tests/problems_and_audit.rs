use driftopt::diagnostics::{
    audit_bounds, error_series, AuditReport, CONSTRAINT_BOUND, DRIFT_PLUS_PENALTY, DUAL_GAP_BOUND,
    DUAL_VALUE_MONOTONE, MULTIPLIER_DISTANCE_MONOTONE, OBJECTIVE_BOUND, QUEUE_BOUND,
};
use driftopt::error::Error;
use driftopt::problems::{
    builtin, load_problem, parse_problem, BuiltinTag, ProblemBundle, Provenance,
};
use driftopt::reference::KktSolution;
use driftopt::solver::{run, Sampling, SolverConfig, Variant};
use driftopt::trace::{IterateTrace, StepStats, TraceSample};
use nalgebra::DVector;

const PRIMAL: [&str; 4] = [
    OBJECTIVE_BOUND,
    CONSTRAINT_BOUND,
    QUEUE_BOUND,
    DRIFT_PLUS_PENALTY,
];

fn applicable(report: &AuditReport, name: &str) -> bool {
    report.get(name).unwrap().applicable
}

fn qp_run(
    variant: Variant,
    v: f64,
    q0: DVector<f64>,
    iters: usize,
) -> (ProblemBundle, SolverConfig, IterateTrace) {
    let b = builtin(BuiltinTag::Qp62).unwrap();
    let config = SolverConfig::new(v, 2, iters, variant).with_q0(q0);
    let trace = run(&b.program, b.oracle.as_ref(), &config, b.reference.as_ref()).unwrap();
    (b, config, trace)
}

#[test]
fn problem_files_round_trip_every_builtin() {
    for tag in BuiltinTag::ALL {
        let b = builtin(tag).unwrap();
        let back = parse_problem(&b.to_json().unwrap(), tag.as_str()).unwrap();
        assert_eq!(back.instance, b.instance, "{tag}");
        assert_eq!(back.reference, b.reference, "{tag}");
        for (x, y) in [
            (back.constants.alpha, b.constants.alpha),
            (back.constants.beta, b.constants.beta),
            (back.constants.gamma, b.constants.gamma),
        ] {
            assert_eq!(x.value, y.value, "{tag}");
            assert_eq!(x.provenance, Provenance::Supplied);
        }
        assert_eq!(back.constants.v_values, b.constants.v_values);
        assert_eq!(back.constants.lc, b.constants.lc);
    }
}

#[test]
fn load_problem_names_bundle_after_file_stem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("links.json");
    std::fs::write(
        &path,
        builtin(BuiltinTag::Num61).unwrap().to_json().unwrap(),
    )
    .unwrap();
    let b = load_problem(&path).unwrap();
    assert_eq!(b.tag, "links");
    assert_eq!(b.reference().unwrap().active_set, vec![0, 2]);
    assert!(matches!(
        load_problem(dir.path().join("absent.json")),
        Err(Error::Io(_))
    ));
}

#[test]
fn malformed_problem_files_are_rejected() {
    let cases = [
        r#"{"kind":"num","A":[[1,1]],"b":[5],"c":[1,1]}"#,
        r#"{"kind":"num","A":[[1,1]],"b":[5],"c":[1,1],"xmax":[9,9],"P":[[1,0],[0,1]]}"#,
        r#"{"kind":"qp","A":[[1,1]],"b":[5],"c":[1,1]}"#,
        r#"{"kind":"qp","A":[[1,1],[1]],"b":[5,5],"c":[1,1],"P":[[1,0],[0,1]]}"#,
        r#"{"kind":"qp","A":[[1,1]],"b":[5,5],"c":[1,1],"P":[[1,0],[0,1]]}"#,
        r#"{"kind":"qp","A":[[1,1]],"b":[5],"c":[1,1],"P":[[1,0],[0,1]],"rho":1}"#,
        r#"{"kind":"qp","A":[[1,1]],"b":[5],"c":[1,1],"P":[[1,0],[0,1]],"alpha":-1}"#,
    ];
    for text in cases {
        assert!(parse_problem(text, "bad").is_err(), "{text}");
    }
    assert!(matches!(
        parse_problem("[1, 2", "bad"),
        Err(Error::Parse(_))
    ));
}

#[test]
fn supplied_gamma_below_dual_curvature_is_rejected() {
    let b = builtin(BuiltinTag::Qp62).unwrap();
    let mut file = b.to_file();
    file.gamma = Some(0.1);
    let text = serde_json::to_string(&file).unwrap();
    assert!(matches!(parse_problem(&text, "qp"), Err(Error::Invalid(_))));
}

/// Trace whose samples sit at `scale` times each primal bound, built by hand.
fn synthetic(reference: &KktSolution, config: &SolverConfig, scale: f64) -> IterateTrace {
    let v = config.v;
    let lam = reference.lambda_norm();
    let q0_sq = config.q0.norm_squared();
    let queue_bound = (q0_sq + v * v * lam * lam).sqrt() + v * lam;
    let mut trace = IterateTrace::new();
    for t in [1usize, 3, 10, 100, 1000] {
        let tf = t as f64;
        let g = DVector::from_element(2, scale * queue_bound / tf);
        let empty = DVector::zeros(0);
        trace
            .push(TraceSample {
                t,
                x: empty.clone(),
                x_avg: empty.clone(),
                queue: empty.clone(),
                multiplier: empty,
                f_avg: reference.f_star + scale * q0_sq / (2.0 * v * tf),
                g_avg: g,
                queue_norm: scale * queue_bound,
                dual_value: reference.f_star - 0.01 / tf,
                lambda_dist: None,
            })
            .unwrap();
    }
    trace.iterations = 1000;
    trace.steps = StepStats {
        max_dpp_excess: Some(-1.0),
        initial_dual_value: Some(reference.f_star - 1.0),
        max_dual_decrease: Some(-1e-3),
        max_lambda_dist_increase: Some(-1e-3),
        ..StepStats::default()
    };
    trace
}

#[test]
fn audit_accepts_traces_inside_bounds_and_rejects_ones_outside() {
    let b = builtin(BuiltinTag::Qp62).unwrap();
    let r = b.reference().unwrap();
    let config = SolverConfig::new(4.0 / 0.34, 2, 1000, Variant::Dpp)
        .with_q0(DVector::from_element(2, 10.0));
    let gamma = Some(b.constants.gamma.value);

    let inside = audit_bounds(&synthetic(r, &config, 0.9), r, &b.program, &config, gamma).unwrap();
    assert!(inside.all_pass, "{inside:?}");
    assert!(PRIMAL.iter().all(|n| applicable(&inside, n)));

    let outside = audit_bounds(&synthetic(r, &config, 1.1), r, &b.program, &config, gamma).unwrap();
    assert!(!outside.all_pass);
    for name in [OBJECTIVE_BOUND, CONSTRAINT_BOUND, QUEUE_BOUND] {
        let e = outside.get(name).unwrap();
        assert!(!e.pass && e.worst_margin.unwrap() < 0.0, "{name}");
    }
}

#[test]
fn audit_reports_inapplicable_bounds_below_thresholds() {
    // gamma / 2 <= V < gamma and V < m beta^2 / alpha.
    let (b, config, trace) = qp_run(Variant::Dpp, 5.0, DVector::zeros(2), 500);
    let report = audit_bounds(
        &trace,
        b.reference().unwrap(),
        &b.program,
        &config,
        Some(9.0),
    )
    .unwrap();
    for name in PRIMAL
        .iter()
        .chain(&[DUAL_GAP_BOUND, MULTIPLIER_DISTANCE_MONOTONE])
    {
        let e = report.get(name).unwrap();
        assert!(!e.applicable && e.pass && e.note.is_some(), "{name}");
    }
    assert!(applicable(&report, DUAL_VALUE_MONOTONE));
    assert!(report.all_pass);

    let none = audit_bounds(&trace, b.reference().unwrap(), &b.program, &config, None).unwrap();
    assert!(!applicable(&none, DUAL_VALUE_MONOTONE));
}

#[test]
fn audit_gates_on_dynamics_and_averaging() {
    let (b, config, trace) = qp_run(Variant::DppShifted, 4.0 / 0.34, DVector::zeros(2), 500);
    let report = audit_bounds(
        &trace,
        b.reference().unwrap(),
        &b.program,
        &config,
        Some(9.0),
    )
    .unwrap();
    assert!(!applicable(&report, OBJECTIVE_BOUND) && !applicable(&report, CONSTRAINT_BOUND));
    assert!(applicable(&report, QUEUE_BOUND) && applicable(&report, DUAL_GAP_BOUND));
    assert!(report.all_pass);

    let b = builtin(BuiltinTag::Qp62).unwrap();
    let config = SolverConfig::new(4.0 / 0.34, 2, 500, Variant::DualSubgradient).with_step(0.05);
    let trace = run(&b.program, b.oracle.as_ref(), &config, b.reference.as_ref()).unwrap();
    let report = audit_bounds(
        &trace,
        b.reference().unwrap(),
        &b.program,
        &config,
        Some(9.0),
    )
    .unwrap();
    assert!(report.entries.iter().all(|e| !e.applicable));

    let matched = SolverConfig::new(4.0 / 0.34, 2, 500, Variant::DualSubgradient);
    let trace = run(
        &b.program,
        b.oracle.as_ref(),
        &matched,
        b.reference.as_ref(),
    )
    .unwrap();
    let report = audit_bounds(
        &trace,
        b.reference().unwrap(),
        &b.program,
        &matched,
        Some(9.0),
    )
    .unwrap();
    assert!(report.entries.iter().all(|e| e.applicable) && report.all_pass);
}

#[test]
fn qp_violation_stays_under_queue_bound_over_t() {
    let v = 4.0 / 0.34;
    let (b, _, trace) = qp_run(Variant::Dpp, v, DVector::zeros(2), 10_000);
    let r = b.reference().unwrap();
    let series = error_series(&trace, r);
    for (t, viol) in series.t.iter().zip(&series.constraint) {
        assert!(
            *viol <= 2.0 * v * r.lambda_norm() / *t as f64 + 1e-12,
            "t = {t}"
        );
    }
}

#[test]
fn loose_link_empties_its_queue() {
    let b = builtin(BuiltinTag::Num61).unwrap();
    let config = SolverConfig::new(363.0, 3, 5_000, Variant::Dpp)
        .with_sampling(Sampling::Linear { stride: 50 });
    let trace = run(&b.program, b.oracle.as_ref(), &config, b.reference.as_ref()).unwrap();
    let last = trace.last().unwrap();
    assert_eq!(last.queue[1], 0.0);
    assert!(last.queue[0] > 0.0 && last.queue[2] > 0.0);
    for s in trace.samples().iter().filter(|s| s.t >= 1_000) {
        assert!(s.g_avg[1] < 0.0, "t = {}", s.t);
    }
}
