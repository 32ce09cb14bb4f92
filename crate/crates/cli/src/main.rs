//! `driftopt`: run the solvers, emit CSV traces, fit rates, audit bounds and
//! print reference solutions.

mod trace_io;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use driftopt::diagnostics::{audit_bounds, fit_in_window, log_tail_window, RateFit, RateModel};
use driftopt::dual::qualification_check;
use driftopt::error::Error;
use driftopt::problems::{builtin, load_problem, BuiltinTag, ProblemBundle, ProblemConstants};
use driftopt::reference::KktSolution;
use driftopt::solver::{choose_v, run, warn_if_small_v, Sampling, SolverConfig, Variant};
use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use trace_io::{summary_path, write_csv, write_json, CsvTrace, RunSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} applicable bound(s) failed")]
    BoundsFailed(usize),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::BoundsFailed(_) => 1,
            CliError::Core(
                Error::Numerical(_)
                | Error::NotConverged { .. }
                | Error::Infeasible(_)
                | Error::Domain(_)
                | Error::Oracle { .. },
            ) => 3,
            _ => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "driftopt",
    version,
    about = "Drift-plus-penalty solvers for constrained convex programs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a solver and write the sampled trace as CSV plus a JSON summary.
    Solve(SolveArgs),
    /// Fit a decay rate to an error column of a trace.
    Fit(FitArgs),
    /// Check a trace against every applicable convergence bound.
    Audit(AuditArgs),
    /// Print the reference KKT solution.
    Kkt(ProblemArgs),
    /// Print problem constants, the recommended V and the constraint qualification.
    Info(ProblemArgs),
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ProblemSource {
    /// Builtin problem tag.
    #[arg(long, value_parser = parse_tag)]
    builtin: Option<BuiltinTag>,
    /// JSON problem file.
    #[arg(long)]
    problem: Option<PathBuf>,
}

impl ProblemSource {
    fn load(&self) -> Result<ProblemBundle, CliError> {
        match (&self.builtin, &self.problem) {
            (Some(tag), None) => Ok(builtin(*tag)?),
            (None, Some(path)) => load_problem(path).map_err(|e| match e {
                Error::Io(io) => CliError::Usage(format!("{}: {io}", path.display())),
                other => CliError::Core(other),
            }),
            _ => Err(CliError::Usage(
                "give exactly one of --builtin or --problem".into(),
            )),
        }
    }
}

#[derive(Args, Debug)]
struct ProblemArgs {
    #[command(flatten)]
    source: ProblemSource,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    source: ProblemSource,
    #[arg(long, value_parser = parse_variant, default_value = "dpp")]
    algorithm: Variant,
    /// Penalty weight; defaults to max(m beta^2 / alpha, gamma).
    #[arg(long = "V")]
    v: Option<f64>,
    /// Initial queues: comma-separated vector or one value for every constraint.
    #[arg(long, default_value = "0")]
    q0: String,
    #[arg(long)]
    iters: usize,
    /// `log`, `log:<per-decade>`, `linear:<stride>` or `full`.
    #[arg(long, value_parser = parse_sampling, default_value = "log")]
    sample: Sampling,
    /// Dual-subgradient step size; defaults to 1/V.
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Series {
    /// `|f(x̄) - f*|` from the `f_err` column.
    Obj,
    /// `max_k max(g_k(x̄), 0)` from the `g_k` columns.
    Constraint,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum)]
    series: Series,
    #[arg(long, value_parser = parse_model)]
    model: RateModel,
    /// Fit over this trailing fraction of log-time when no explicit window is given.
    #[arg(long, default_value_t = 0.5)]
    window_fraction: f64,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    /// Errors at or below this value are treated as noise and dropped.
    #[arg(long, default_value_t = 0.0)]
    floor: f64,
}

#[derive(Args, Debug)]
struct AuditArgs {
    #[arg(long)]
    trace: PathBuf,
    #[command(flatten)]
    source: ProblemSource,
}

fn parse_tag(s: &str) -> Result<BuiltinTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> Result<RateModel, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_sampling(s: &str) -> Result<Sampling, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_q0(s: &str, m: usize) -> Result<DVector<f64>, CliError> {
    let vals = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(format!("--q0 '{s}': {e}")))?;
    match vals.len() {
        1 => Ok(DVector::from_element(m, vals[0])),
        n if n == m => Ok(DVector::from_vec(vals)),
        n => Err(CliError::Usage(format!(
            "--q0 has {n} entries, problem has {m} constraints"
        ))),
    }
}

/// Writes `value` to stdout; a closed pipe (`| head`) is not an error.
fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn same_file(a: &Path, b: &Path) -> bool {
    a == b || matches!((a.canonicalize(), b.canonicalize()), (Ok(x), Ok(y)) if x == y)
}

fn solve(args: &SolveArgs) -> Result<(), CliError> {
    let bundle = args.source.load()?;
    let m = bundle.program.m();
    let gamma = Some(bundle.constants.gamma.value);
    let v = args.v.unwrap_or_else(|| choose_v(&bundle.program, gamma));
    let mut config = SolverConfig::new(v, m, args.iters, args.algorithm)
        .with_q0(parse_q0(&args.q0, m)?)
        .with_sampling(args.sample);
    if let Some(step) = args.step {
        config = config.with_step(step);
    }
    config
        .validate(m)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    warn_if_small_v(&bundle.program, v, gamma);

    let reference = bundle.reference.as_ref();
    if reference.is_none() {
        log::warn!("no reference solution; error columns are omitted");
    }
    let json_path = summary_path(&args.out);
    if let Some(problem) = &args.source.problem {
        if [&args.out, &json_path]
            .iter()
            .any(|p| same_file(p, problem))
        {
            return Err(CliError::Usage(format!(
                "output would overwrite {}",
                problem.display()
            )));
        }
    }
    match run(&bundle.program, bundle.oracle.as_ref(), &config, reference) {
        Ok(trace) => {
            write_csv(&args.out, &trace, m, reference)?;
            let summary = RunSummary::new(&bundle.tag, &config, &trace, reference, "ok");
            write_json(&json_path, &summary)?;
            print_json(&summary)
        }
        Err(Error::Oracle {
            iteration,
            source,
            partial,
        }) => {
            write_csv(&args.out, &partial, m, reference)?;
            let status = format!("oracle failed at iteration {iteration}: {source}");
            let summary = RunSummary::new(&bundle.tag, &config, &partial, reference, &status);
            write_json(&json_path, &summary)?;
            print_json(&summary)?;
            Err(CliError::Core(Error::Oracle {
                iteration,
                source,
                partial,
            }))
        }
        Err(e) => Err(e.into()),
    }
}

fn fit(args: &FitArgs) -> Result<RateFit, CliError> {
    let csv = CsvTrace::read(&args.trace)?;
    let t = csv.column("t")?;
    let e = match args.series {
        Series::Obj => csv.column("f_err")?,
        Series::Constraint => csv.violation()?,
    };
    let series: Vec<(f64, f64)> = t.into_iter().zip(e).collect();
    let tail = log_tail_window(&series, args.window_fraction)?;
    let window = [args.t_min.unwrap_or(tail[0]), args.t_max.unwrap_or(tail[1])];
    Ok(fit_in_window(&series, args.model, window, args.floor)?)
}

fn read_summary(csv_path: &Path) -> Result<RunSummary, CliError> {
    let path = summary_path(csv_path);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn audit(args: &AuditArgs) -> Result<(), CliError> {
    let bundle = args.source.load()?;
    let reference = bundle.reference()?;
    let summary = read_summary(&args.trace)?;
    let config = summary.config.to_config();
    let csv = CsvTrace::read(&args.trace)?;
    if csv.constraint_columns().len() != bundle.program.m() {
        return Err(CliError::Usage(format!(
            "trace has {} constraint columns, problem has {}",
            csv.constraint_columns().len(),
            bundle.program.m()
        )));
    }
    let trace = csv.to_trace(
        reference.f_star,
        summary.steps,
        summary.completed_iterations,
    )?;
    let report = audit_bounds(
        &trace,
        reference,
        &bundle.program,
        &config,
        Some(bundle.constants.gamma.value),
    )?;
    print_json(&report)?;
    let failed = report
        .entries
        .iter()
        .filter(|e| e.applicable && !e.pass)
        .count();
    if failed > 0 {
        return Err(CliError::BoundsFailed(failed));
    }
    Ok(())
}

/// Reference solution with constraint labels counted from 1.
#[derive(Serialize)]
struct KktOutput {
    problem: String,
    x_star: Vec<f64>,
    f_star: f64,
    lambda_star: Vec<f64>,
    active: Vec<usize>,
    slack: Vec<usize>,
}

impl KktOutput {
    fn new(tag: &str, r: &KktSolution, m: usize) -> Self {
        Self {
            problem: tag.to_string(),
            x_star: r.x_star.iter().copied().collect(),
            f_star: r.f_star,
            lambda_star: r.lambda_star.iter().copied().collect(),
            active: r.active_set.iter().map(|k| k + 1).collect(),
            slack: (0..m)
                .filter(|k| !r.active_set.contains(k))
                .map(|k| k + 1)
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct InfoOutput {
    problem: String,
    n: usize,
    m: usize,
    constants: ProblemConstants,
    recommended_v: f64,
    locally_quadratic: Option<bool>,
    strongly_concave: bool,
    reference: Option<KktOutput>,
    reference_error: Option<String>,
}

fn info(bundle: &ProblemBundle) -> Result<InfoOutput, CliError> {
    let m = bundle.program.m();
    let a = bundle.instance.a();
    let full = qualification_check(a, &[])?;
    let local = match &bundle.reference {
        Some(r) => Some(qualification_check(a, &r.active_set)?.locally_quadratic),
        None => None,
    };
    Ok(InfoOutput {
        problem: bundle.tag.clone(),
        n: bundle.program.n(),
        m,
        constants: bundle.constants.clone(),
        recommended_v: choose_v(&bundle.program, Some(bundle.constants.gamma.value)),
        locally_quadratic: local,
        strongly_concave: full.strongly_concave,
        reference: bundle
            .reference
            .as_ref()
            .map(|r| KktOutput::new(&bundle.tag, r, m)),
        reference_error: bundle.reference_error.clone(),
    })
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Solve(args) => solve(args),
        Command::Fit(args) => print_json(&fit(args)?),
        Command::Audit(args) => audit(args),
        Command::Kkt(args) => {
            let bundle = args.source.load()?;
            let r = bundle.reference()?;
            print_json(&KktOutput::new(&bundle.tag, r, bundle.program.m()))
        }
        Command::Info(args) => print_json(&info(&args.source.load()?)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("driftopt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
