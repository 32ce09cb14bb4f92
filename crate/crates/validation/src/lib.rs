//! Acceptance criteria. Each check runs its experiment at the pinned tolerance
//! and returns a verdict with the measured values.

use std::time::{Duration, Instant};

use driftopt::diagnostics::{self, audit_bounds, error_series, fit_in_window, RateModel};
use driftopt::dual::{
    general_dual_hessian, num_dual_hessian, qualification_check, smoothness_modulus,
};
use driftopt::oracles::{InnerOracle, NumInstance};
use driftopt::problems::{builtin, BuiltinTag, Instance, ProblemBundle};
use driftopt::queue::{drift_identity_residual, QueueState};
use driftopt::reference::KktSolution;
use driftopt::solver::{choose_v, Solver, SolverConfig, Variant};
use driftopt::trace::IterateTrace;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Optimum printed for the NUM experiment.
const NUM_PRINTED_F_STAR: f64 = -7.5253;
const QP_V: f64 = 4.0 / 0.34;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

fn bundle(tag: BuiltinTag) -> ProblemBundle {
    builtin(tag).expect("builtin problem")
}

fn reference(b: &ProblemBundle) -> &KktSolution {
    b.reference().expect("reference solution")
}

fn run_dpp(
    b: &ProblemBundle,
    variant: Variant,
    v: f64,
    q0: DVector<f64>,
    iters: usize,
) -> (SolverConfig, IterateTrace) {
    let config = SolverConfig::new(v, b.program.m(), iters, variant).with_q0(q0);
    let trace = Solver::new(&b.program, b.oracle.as_ref(), &config)
        .expect("valid config")
        .with_reference(reference(b))
        .run()
        .expect("run");
    (config, trace)
}

fn timed(limit: Duration, elapsed: Duration, detail: &mut String) -> bool {
    detail.push_str(&format!(
        "; {:.3}s (limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    ));
    elapsed < limit
}

pub fn ground_truth() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();

    let start = Instant::now();
    let num = bundle(BuiltinTag::Num61);
    let t_num = start.elapsed();
    let r = reference(&num);
    let x_ok = (&r.x_star - dv(&[2.0, 3.2, 4.8])).amax() <= 1e-3;
    let f_ok = (r.f_star - NUM_PRINTED_F_STAR).abs() <= 1e-3;
    ok &= x_ok && f_ok && t_num < Duration::from_secs(1);
    parts.push(format!(
        "num_6_1 x*={:.4?} ({}), f*={:.6} vs printed {NUM_PRINTED_F_STAR} ({}), {:.3}s",
        r.x_star.as_slice(),
        if x_ok { "ok" } else { "MISMATCH" },
        r.f_star,
        if f_ok { "ok" } else { "MISMATCH" },
        t_num.as_secs_f64()
    ));

    let start = Instant::now();
    let qp = bundle(BuiltinTag::Qp62);
    let t_qp = start.elapsed();
    let r = reference(&qp);
    let qp_ok = (&r.x_star - dv(&[-1.0, -1.0])).amax() <= 1e-6 && (r.f_star - 8.0).abs() <= 1e-6;
    ok &= qp_ok && t_qp < Duration::from_secs(1);
    parts.push(format!(
        "qp_6_2 x*={:.6?}, f*={:.9} ({}), {:.3}s",
        r.x_star.as_slice(),
        r.f_star,
        if qp_ok { "ok" } else { "MISMATCH" },
        t_qp.as_secs_f64()
    ));

    let start = Instant::now();
    let rd = bundle(BuiltinTag::Num52RankDeficient);
    let t_rd = start.elapsed();
    let r = reference(&rd);
    let rd_ok = (&r.x_star - dv(&[0.8553, 2.1447, 1.1447, 5.8553])).amax() <= 1e-3
        && (&r.lambda_star - dv(&[0.3858, 0.0903, 0.7833, 0.0805])).amax() <= 1e-3;
    ok &= rd_ok && t_rd < Duration::from_secs(1);
    parts.push(format!(
        "num_5_2 x*={:.4?}, lambda*={:.4?} ({}), {:.3}s",
        r.x_star.as_slice(),
        r.lambda_star.as_slice(),
        if rd_ok { "ok" } else { "MISMATCH" },
        t_rd.as_secs_f64()
    ));
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

pub fn objective_non_violation() -> Outcome {
    let b = bundle(BuiltinTag::Num61);
    let f_star = reference(&b).f_star;
    let start = Instant::now();
    let (_, trace) = run_dpp(&b, Variant::Dpp, 363.0, DVector::zeros(3), 100_000);
    let elapsed = start.elapsed();
    let worst = trace
        .samples()
        .iter()
        .map(|s| s.f_avg - f_star)
        .fold(f64::NEG_INFINITY, f64::max);
    let worst_printed = trace
        .samples()
        .iter()
        .map(|s| s.f_avg - NUM_PRINTED_F_STAR)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut detail = format!(
        "max f(x̄(t)) - f* = {worst:.3e} over {} samples (against printed optimum: {worst_printed:.3e})",
        trace.len()
    );
    let in_time = timed(Duration::from_secs(10), elapsed, &mut detail);
    Outcome {
        pass: worst <= 1e-9 && worst_printed <= 1e-9 && in_time,
        detail,
    }
}

pub fn qp_bound_audits() -> Outcome {
    let b = bundle(BuiltinTag::Qp62);
    let gamma = b.constants.gamma.value;
    let mut ok = true;
    let mut parts = Vec::new();
    let start = Instant::now();
    for q0 in [dv(&[0.0, 0.0]), dv(&[10.0, 10.0])] {
        let (config, trace) = run_dpp(&b, Variant::Dpp, QP_V, q0.clone(), 100_000);
        let report =
            audit_bounds(&trace, reference(&b), &b.program, &config, Some(gamma)).expect("audit");
        let applied: Vec<String> = report
            .entries
            .iter()
            .filter(|e| e.applicable)
            .map(|e| format!("{}={}", e.name, if e.pass { "pass" } else { "FAIL" }))
            .collect();
        let all_primal_applied = [
            diagnostics::OBJECTIVE_BOUND,
            diagnostics::CONSTRAINT_BOUND,
            diagnostics::QUEUE_BOUND,
        ]
        .iter()
        .all(|n| report.get(n).is_some_and(|e| e.applicable));
        ok &= report.all_pass && all_primal_applied;
        parts.push(format!("Q(0)={:?}: {}", q0.as_slice(), applied.join(",")));
    }
    let mut detail = parts.join("; ");
    let in_time = timed(Duration::from_secs(10), start.elapsed(), &mut detail);
    Outcome {
        pass: ok && in_time,
        detail,
    }
}

pub fn power_rate() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for (tag, v) in [(BuiltinTag::Num61, 363.0), (BuiltinTag::Qp62, QP_V)] {
        let b = bundle(tag);
        let m = b.program.m();
        let (_, trace) = run_dpp(&b, Variant::Dpp, v, DVector::zeros(m), 100_000);
        let series = error_series(&trace, reference(&b));
        match fit_in_window(
            &series.constraint_points(),
            RateModel::Power,
            [1e3, 1e5],
            0.0,
        ) {
            Ok(fit) => {
                ok &= (0.85..=1.15).contains(&fit.rate);
                parts.push(format!(
                    "{tag}: p={:.4} (R^2 {:.4}, {} samples)",
                    fit.rate, fit.quality, fit.samples
                ));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{tag}: fit failed: {e}"));
            }
        }
    }
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

/// Geometric-tail runs. The window ends before the error reaches the level of
/// floating-point noise in `f`, and samples under `floor` are ignored.
pub fn geometric_rate() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    let cases = [
        (
            BuiltinTag::Num61,
            422.0,
            8_000,
            [2_000.0, 8_000.0],
            0.995..=0.9995,
        ),
        (
            BuiltinTag::Qp62,
            QP_V,
            2_000,
            [500.0, 2_000.0],
            0.985..=0.999,
        ),
    ];
    for (tag, v, iters, window, range) in cases {
        let b = bundle(tag);
        let m = b.program.m();
        let (_, trace) = run_dpp(&b, Variant::DppShifted, v, DVector::zeros(m), iters);
        let r = reference(&b);
        let series = error_series(&trace, r).objective_points();
        let floor = 1e-11 * (1.0 + r.f_star.abs());
        let geo = fit_in_window(&series, RateModel::Geometric, window, floor);
        let pow = fit_in_window(&series, RateModel::Power, window, floor);
        match (geo, pow) {
            (Ok(g), Ok(p)) => {
                let better = g.quality > p.quality;
                ok &= range.contains(&g.rate) && better;
                parts.push(format!(
                    "{tag}: r={:.5} in [{}, {}], quality geometric {:.5} vs power {:.5}",
                    g.rate,
                    range.start(),
                    range.end(),
                    g.quality,
                    p.quality
                ));
            }
            (g, p) => {
                ok = false;
                parts.push(format!("{tag}: fit failed: {:?} / {:?}", g.err(), p.err()));
            }
        }
    }
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

pub fn dual_machinery() -> Outcome {
    let b = bundle(BuiltinTag::Qp62);
    let gamma = smoothness_modulus(0.34, 3f64.sqrt()).expect("modulus");
    let v = QP_V.max(gamma);
    let (config, trace) = run_dpp(&b, Variant::Dpp, v, DVector::zeros(2), 100_000);
    let report =
        audit_bounds(&trace, reference(&b), &b.program, &config, Some(gamma)).expect("audit");
    let mut ok = true;
    let mut parts = vec![format!("V={v:.4}, gamma={gamma:.4}")];
    for name in [
        diagnostics::DUAL_GAP_BOUND,
        diagnostics::MULTIPLIER_DISTANCE_MONOTONE,
        diagnostics::DUAL_VALUE_MONOTONE,
    ] {
        let e = report.get(name).expect("audit entry");
        ok &= e.applicable && e.pass;
        parts.push(format!(
            "{name}: {} (margin {:.3e})",
            if !e.applicable {
                "n/a"
            } else if e.pass {
                "pass"
            } else {
                "FAIL"
            },
            e.worst_margin.unwrap_or(f64::NAN)
        ));
    }
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

pub fn drift_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for tag in BuiltinTag::ALL {
        let b = bundle(tag);
        let v = choose_v(&b.program, Some(b.constants.gamma.value));
        let config = SolverConfig::new(v, b.program.m(), 10_000, Variant::Dpp);
        let trace = Solver::new(&b.program, b.oracle.as_ref(), &config)
            .unwrap()
            .run()
            .unwrap();
        worst = worst.max(trace.steps.max_drift_residual);
        parts.push(format!("{tag}: {:.2e}", trace.steps.max_drift_residual));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random_worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.gen_range(1..=8);
        let q = QueueState::new(DVector::from_fn(m, |_, _| rng.gen_range(0.0..100.0))).unwrap();
        let g = DVector::from_fn(m, |_, _| rng.gen_range(-50.0..50.0));
        let next = q.update(&g).unwrap();
        random_worst = random_worst.max(drift_identity_residual(&q, &next, &g).unwrap());
    }
    parts.push(format!("1000 random pairs: {random_worst:.2e}"));
    Outcome {
        pass: worst <= 1e-9 && random_worst <= 1e-9,
        detail: parts.join("; "),
    }
}

pub fn counterexample() -> Outcome {
    let b = bundle(BuiltinTag::Num52RankDeficient);
    let Instance::Num(inst) = &b.instance else {
        unreachable!("NUM builtin")
    };
    let mu = dv(&[1.0, 1.0, -1.0, -1.0]);
    let mu_a = inst.a.tr_mul(&mu);
    let mu_b = mu.dot(&inst.b);
    let exact = mu_a.iter().all(|v| *v == 0.0) && mu_b == 0.0;
    let r = reference(&b);
    let h = num_dual_hessian(inst, &r.lambda_star).expect("hessian");
    let null = (&h * &mu).norm();
    let rd = qualification_check(&inst.a, &r.active_set).unwrap();
    let num = bundle(BuiltinTag::Num61);
    let full = qualification_check(num.instance.a(), &reference(&num).active_set).unwrap();
    Outcome {
        pass: exact && null <= 1e-6 && !rd.strongly_concave && full.strongly_concave,
        detail: format!(
            "mu^T A = {:?}, mu^T b = {mu_b}, ||H mu|| = {null:.2e}, strongly_concave: num_5_2={} num_6_1={}",
            mu_a.as_slice(),
            rd.strongly_concave,
            full.strongly_concave
        ),
    }
}

pub fn oracle_equivalences() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();

    for tag in [BuiltinTag::Num61, BuiltinTag::Qp62] {
        let b = bundle(tag);
        let m = b.program.m();
        let v = b.constants.v_values[0];
        let dpp = SolverConfig::new(v, m, 10_000, Variant::Dpp);
        let sub = SolverConfig::new(v, m, 10_000, Variant::DualSubgradient);
        let s1 = Solver::new(&b.program, b.oracle.as_ref(), &dpp).unwrap();
        let s2 = Solver::new(&b.program, b.oracle.as_ref(), &sub).unwrap();
        let (mut st1, mut st2) = (s1.initial_state(&[]), s2.initial_state(&[]));
        let mut gap: f64 = 0.0;
        for _ in 0..10_000 {
            let r1 = s1.dpp_step(&mut st1).unwrap();
            let r2 = s2.dpp_step(&mut st2).unwrap();
            gap = gap.max((&r1.x - &r2.x).amax());
            gap = gap.max((r1.queue_next.multiplier(v) - r2.queue_next.as_vector()).amax());
        }
        ok &= gap <= 1e-12;
        parts.push(format!("{tag} DPP vs dual subgradient: {gap:.2e}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for tag in BuiltinTag::ALL {
        let b = bundle(tag);
        let generic = b.generic_oracle();
        let v = choose_v(&b.program, Some(b.constants.gamma.value));
        let lam = reference(&b).lambda_star.clone();
        let scale = 2.0 * lam.amax().max(0.1);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let q = DVector::from_fn(b.program.m(), |_, _| v * rng.gen_range(0.0..scale));
            let exact = b.oracle.argmin(&q, v).unwrap();
            let approx = generic.argmin(&q, v).unwrap();
            worst = worst.max((exact - approx).amax());
        }
        ok &= worst <= 1e-6;
        parts.push(format!("{tag} closed form vs generic: {worst:.2e}"));
    }

    let mut worst: f64 = 0.0;
    for tag in [BuiltinTag::Num61, BuiltinTag::Num52RankDeficient] {
        let b = bundle(tag);
        let Instance::Num(inst) = &b.instance else {
            unreachable!()
        };
        let lam = &reference(&b).lambda_star + DVector::from_element(inst.m(), 0.05);
        worst = worst.max(hessian_gap(inst, &b, &lam));
        worst = worst.max(hessian_gap(inst, &b, &reference(&b).lambda_star));
    }
    ok &= worst <= 1e-8;
    parts.push(format!(
        "NUM dual Hessian closed form vs general: {worst:.2e}"
    ));
    Outcome {
        pass: ok,
        detail: parts.join("; "),
    }
}

fn hessian_gap(inst: &NumInstance, b: &ProblemBundle, lam: &DVector<f64>) -> f64 {
    let x = b.oracle.argmin(lam, 1.0).unwrap();
    let uncapped = (0..inst.n()).all(|i| x[i] < inst.xmax[i]);
    assert!(uncapped, "closed-form Hessian needs uncapped rates");
    let closed = num_dual_hessian(inst, lam).unwrap();
    let general = general_dual_hessian(&inst.a, &inst.objective_hessian(&x), &[], lam).unwrap();
    let diff: DMatrix<f64> = closed - general;
    diff.amax()
}

pub type Check = fn() -> Outcome;

/// Every criterion in report order.
pub fn criteria() -> [(&'static str, Check); 9] {
    [
        ("ground truth", ground_truth),
        ("objective non-violation", objective_non_violation),
        ("bound audits", qp_bound_audits),
        ("O(1/t) rate", power_rate),
        ("geometric rate", geometric_rate),
        ("dual machinery", dual_machinery),
        ("drift identity", drift_identity),
        ("rank-deficient counterexample", counterexample),
        ("oracle equivalences", oracle_equivalences),
    ]
}
