use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn driftopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftopt"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

fn column(csv: &Path, name: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(csv).unwrap();
    let i = rdr
        .headers()
        .unwrap()
        .iter()
        .position(|h| h == name)
        .unwrap();
    rdr.records()
        .map(|r| r.unwrap()[i].parse().unwrap())
        .collect()
}

fn solve(dir: &Path, name: &str, extra: &[&str]) -> (std::path::PathBuf, Output) {
    let out = dir.join(name);
    let mut args = vec!["solve"];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["--out", out.to_str().unwrap()]);
    let res = driftopt(&args);
    (out, res)
}

#[test]
fn kkt_reports_one_based_active_and_slack_sets() {
    let out = driftopt(&["kkt", "--builtin", "num_6_1"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["active"], serde_json::json!([1, 3]));
    assert_eq!(v["slack"], serde_json::json!([2]));
}

#[test]
fn kkt_matches_published_solutions() {
    let qp = json(&driftopt(&["kkt", "--builtin", "qp_6_2"]));
    for x in floats(&qp["x_star"]) {
        assert!((x + 1.0).abs() < 1e-9);
    }
    assert!((qp["f_star"].as_f64().unwrap() - 8.0).abs() < 1e-9);

    let rd = json(&driftopt(&["kkt", "--builtin", "num_5_2_rank_deficient"]));
    let expected = [0.3858, 0.0903, 0.7833, 0.0805];
    for (l, e) in floats(&rd["lambda_star"]).iter().zip(expected) {
        assert!((l - e).abs() < 2e-4, "{l} vs {e}");
    }
}

#[test]
fn zero_iterations_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = solve(
        dir.path(),
        "x.csv",
        &["--builtin", "qp_6_2", "--iters", "0"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 5] = [
        &[
            "--builtin",
            "qp_6_2",
            "--iters",
            "10",
            "--algorithm",
            "newton",
        ],
        &["--builtin", "nope", "--iters", "10"],
        &["--builtin", "qp_6_2", "--iters", "10", "--q0", "1,2,3"],
        &[
            "--builtin",
            "qp_6_2",
            "--iters",
            "10",
            "--sample",
            "linear:0",
        ],
        &[
            "--builtin",
            "qp_6_2",
            "--problem",
            "p.json",
            "--iters",
            "10",
        ],
    ];
    for extra in cases {
        let (_, out) = solve(dir.path(), "x.csv", extra);
        assert_eq!(out.status.code(), Some(2), "{extra:?}");
    }
}

#[test]
fn qp_run_converges_and_passes_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, out) = solve(
        dir.path(),
        "qp.csv",
        &[
            "--builtin",
            "qp_6_2",
            "--algorithm",
            "dpp",
            "--V",
            "11.7647",
            "--iters",
            "100000",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    // From Q(0) = 0 the queues settle at V lambda*, so the averaged constraint
    // is V lambda* / t and the objective sits V ||lambda*||^2 / t below f*.
    let summary = json(&out);
    let f_err = summary["final_errors"]["f_err"].as_f64().unwrap();
    let predicted = 11.7647 * (5.0f64.powi(2) + 8.0f64.powi(2)) / 1e5;
    assert!(
        (f_err / predicted - 1.0).abs() < 0.01,
        "f_err = {f_err}, predicted {predicted}"
    );
    assert_eq!(*column(&csv, "f_err").last().unwrap(), f_err);

    let fit = json(&driftopt(&[
        "fit",
        "--trace",
        csv.to_str().unwrap(),
        "--series",
        "obj",
        "--model",
        "power",
    ]));
    let p = fit["rate"].as_f64().unwrap();
    assert!((0.85..=1.15).contains(&p), "p = {p}");

    let audit = driftopt(&[
        "audit",
        "--trace",
        csv.to_str().unwrap(),
        "--builtin",
        "qp_6_2",
    ]);
    assert_eq!(audit.status.code(), Some(0));
    assert_eq!(json(&audit)["all_pass"], Value::Bool(true));
}

#[test]
fn warm_started_qp_run_reaches_millesimal_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = solve(
        dir.path(),
        "warm.csv",
        &[
            "--builtin",
            "qp_6_2",
            "--V",
            "11.7647",
            "--q0",
            "58.8235,94.1176",
            "--iters",
            "100000",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(json(&out)["final_errors"]["f_err"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn shifted_num_run_has_decreasing_dual_gap_and_geometric_tail() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, out) = solve(
        dir.path(),
        "num3.csv",
        &[
            "--builtin",
            "num_6_1",
            "--algorithm",
            "dpp-shifted",
            "--V",
            "422",
            "--iters",
            "20000",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let gap = column(&csv, "dual_gap");
    for w in gap.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
    }
    let fit = json(&driftopt(&[
        "fit",
        "--trace",
        csv.to_str().unwrap(),
        "--series",
        "obj",
        "--model",
        "geometric",
        "--t-min",
        "2000",
        "--t-max",
        "8000",
        "--floor",
        "1e-10",
    ]));
    let r = fit["rate"].as_f64().unwrap();
    assert!((0.995..=0.9995).contains(&r), "r = {r}");
}

#[test]
fn nonzero_initial_queue_is_audited() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, out) = solve(
        dir.path(),
        "q0.csv",
        &["--builtin", "qp_6_2", "--q0", "10,10", "--iters", "5000"],
    );
    assert_eq!(out.status.code(), Some(0));
    let audit = driftopt(&[
        "audit",
        "--trace",
        csv.to_str().unwrap(),
        "--builtin",
        "qp_6_2",
    ]);
    assert_eq!(audit.status.code(), Some(0));
    let report = json(&audit);
    let obj = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["name"] == "objective_bound")
        .unwrap();
    assert_eq!(obj["applicable"], Value::Bool(true));
    assert_eq!(obj["pass"], Value::Bool(true));
}

#[test]
fn custom_subgradient_step_disables_primal_audits() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, out) = solve(
        dir.path(),
        "sub.csv",
        &[
            "--builtin",
            "qp_6_2",
            "--algorithm",
            "dual-subgradient",
            "--step",
            "0.05",
            "--iters",
            "500",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["config"]["step"].as_f64(), Some(0.05));
    let audit = driftopt(&[
        "audit",
        "--trace",
        csv.to_str().unwrap(),
        "--builtin",
        "qp_6_2",
    ]);
    let report = json(&audit);
    assert!(report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["applicable"] == false));
}

#[test]
fn truncated_trace_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = solve(
        dir.path(),
        "t.csv",
        &["--builtin", "qp_6_2", "--iters", "200"],
    );
    let text = fs::read_to_string(&csv).unwrap();
    fs::write(&csv, &text[..text.len() - 40]).unwrap();
    let audit = driftopt(&[
        "audit",
        "--trace",
        csv.to_str().unwrap(),
        "--builtin",
        "qp_6_2",
    ]);
    assert_eq!(audit.status.code(), Some(2));
}

#[test]
fn tampered_trace_fails_audit() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = solve(
        dir.path(),
        "bad.csv",
        &["--builtin", "qp_6_2", "--iters", "2000"],
    );
    // Claim a queue far above what the bound allows at the last sample.
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let last = lines.len() - 1;
    let mut cells: Vec<String> = lines[last].split(',').map(str::to_string).collect();
    cells[5] = "1e9".into();
    lines[last] = cells.join(",");
    fs::write(&csv, lines.join("\n") + "\n").unwrap();
    let audit = driftopt(&[
        "audit",
        "--trace",
        csv.to_str().unwrap(),
        "--builtin",
        "qp_6_2",
    ]);
    assert_eq!(audit.status.code(), Some(1));
    assert_eq!(json(&audit)["all_pass"], Value::Bool(false));
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "--builtin",
        "num_6_1",
        "--algorithm",
        "dual-subgradient",
        "--iters",
        "3000",
        "--sample",
        "linear:7",
    ];
    let (a, _) = solve(dir.path(), "a.csv", &args);
    let (b, _) = solve(dir.path(), "b.csv", &args);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(
        fs::read(a.with_extension("summary.json")).unwrap(),
        fs::read(b.with_extension("summary.json")).unwrap()
    );
}

#[test]
fn csv_numbers_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, out) = solve(
        dir.path(),
        "r.csv",
        &["--builtin", "qp_6_2", "--iters", "777"],
    );
    let summary = json(&out);
    let f_avg = *column(&csv, "f_avg").last().unwrap();
    assert_eq!(f_avg, summary["final_errors"]["f_avg"].as_f64().unwrap());
    let header = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "t,f_avg,f_err,g_1,g_2,qnorm,lambda_dist,dual_gap");
}

#[test]
fn fit_recovers_synthetic_power_law() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.csv");
    let mut text = String::from("t,f_err\n");
    for k in 0..=400 {
        let t = 10f64.powf(k as f64 / 100.0).round();
        text.push_str(&format!("{t},{:e}\n", 1.0 / t));
    }
    // Rounding repeats small t; keep strictly increasing rows only.
    let mut seen = std::collections::BTreeMap::new();
    for line in text.lines().skip(1) {
        seen.insert(
            line.split(',').next().unwrap().parse::<f64>().unwrap() as u64,
            line.to_string(),
        );
    }
    let body: Vec<String> = seen.into_values().collect();
    fs::write(&path, format!("t,f_err\n{}\n", body.join("\n"))).unwrap();
    let out = driftopt(&[
        "fit",
        "--trace",
        path.to_str().unwrap(),
        "--series",
        "obj",
        "--model",
        "power",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let p = json(&out)["rate"].as_f64().unwrap();
    assert!((p - 1.0).abs() < 1e-6, "p = {p}");
}

#[test]
fn fit_without_required_column_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cols.csv");
    fs::write(&path, "t,qnorm\n1,1\n2,0.5\n").unwrap();
    for series in ["obj", "constraint"] {
        let out = driftopt(&[
            "fit",
            "--trace",
            path.to_str().unwrap(),
            "--series",
            series,
            "--model",
            "power",
        ]);
        assert_eq!(out.status.code(), Some(2), "{series}");
    }
}

#[test]
fn problem_files_drive_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.json");
    fs::write(
        &path,
        r#"{"kind": "qp", "P": [[1, 0], [0, 1]], "c": [0, 0], "A": [[-1, 0]], "b": [-1]}"#,
    )
    .unwrap();
    let p = path.to_str().unwrap();
    let kkt = json(&driftopt(&["kkt", "--problem", p]));
    assert_eq!(kkt["problem"], "toy");
    assert!((kkt["f_star"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(kkt["active"], serde_json::json!([1]));

    let info = json(&driftopt(&["info", "--problem", p]));
    assert_eq!(info["constants"]["alpha"]["provenance"], "computed");
    assert!(info["recommended_v"].as_f64().unwrap() > 0.0);

    let (csv, out) = solve(dir.path(), "toy.csv", &["--problem", p, "--iters", "4000"]);
    assert_eq!(out.status.code(), Some(0));
    let audit = driftopt(&["audit", "--trace", csv.to_str().unwrap(), "--problem", p]);
    assert_eq!(audit.status.code(), Some(0));

    // The summary sidecar must never clobber the problem file.
    let clobber = driftopt(&["solve", "--problem", p, "--iters", "10", "--out", p]);
    assert_eq!(clobber.status.code(), Some(2));
    assert!(fs::read_to_string(&path).unwrap().contains("\"kind\""));

    fs::write(&path, r#"{"kind": "qp", "c": [0]}"#).unwrap();
    assert_eq!(driftopt(&["kkt", "--problem", p]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    assert_eq!(
        driftopt(&["info", "--problem", missing.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn info_lists_constants_with_provenance() {
    let v = json(&driftopt(&["info", "--builtin", "num_6_1"]));
    assert_eq!(v["constants"]["gamma"]["value"].as_f64(), Some(422.0));
    assert_eq!(v["constants"]["gamma"]["provenance"], "paper");
    assert_eq!(v["locally_quadratic"], Value::Bool(true));
    let rd = json(&driftopt(&["info", "--builtin", "num_5_2_rank_deficient"]));
    assert_eq!(rd["strongly_concave"], Value::Bool(false));
}
