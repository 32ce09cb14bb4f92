//! CSV traces and the JSON run summary written next to them.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use driftopt::reference::KktSolution;
use driftopt::solver::{Sampling, SolverConfig, Variant};
use driftopt::trace::{IterateTrace, StepStats, TraceSample};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// 17 significant digits, enough to round-trip any double.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn header(m: usize, with_reference: bool) -> Vec<String> {
    let mut h = vec!["t".to_string(), "f_avg".into()];
    if with_reference {
        h.push("f_err".into());
    }
    h.extend((1..=m).map(|k| format!("g_{k}")));
    h.push("qnorm".into());
    if with_reference {
        h.push("lambda_dist".into());
        h.push("dual_gap".into());
    }
    h
}

pub fn write_csv(
    path: &Path,
    trace: &IterateTrace,
    m: usize,
    reference: Option<&KktSolution>,
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(m, reference.is_some()))?;
    for s in trace.samples() {
        let mut row = vec![s.t.to_string(), num(s.f_avg)];
        if let Some(r) = reference {
            row.push(num((s.f_avg - r.f_star).abs()));
        }
        row.extend(s.g_avg.iter().map(|g| num(*g)));
        row.push(num(s.queue_norm));
        if let Some(r) = reference {
            row.push(num(s.lambda_dist.unwrap_or(f64::NAN)));
            row.push(num(r.f_star - s.dual_value));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed CSV trace: column names and numeric rows.
#[derive(Debug)]
pub struct CsvTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl CsvTrace {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut rdr = csv::Reader::from_path(path)?;
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if columns.first().map(String::as_str) != Some("t") {
            return Err(CliError::Usage(format!(
                "{}: first column must be 't'",
                path.display()
            )));
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| v.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Usage(format!("{}: row {}: {e}", path.display(), i + 1)))?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(CliError::Usage(format!(
                "{}: trace has no rows",
                path.display()
            )));
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let i = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::Usage(format!("trace has no '{name}' column")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn constraint_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with("g_"))
            .map(|(i, _)| i)
            .collect()
    }

    /// `max_k max(g_k, 0)` per row.
    pub fn violation(&self) -> Result<Vec<f64>, CliError> {
        let cols = self.constraint_columns();
        if cols.is_empty() {
            return Err(CliError::Usage("trace has no g_k columns".into()));
        }
        Ok(self
            .rows
            .iter()
            .map(|r| cols.iter().fold(0.0, |acc: f64, &i| acc.max(r[i])))
            .collect())
    }

    /// Rebuilds the fields of a trace that the bound audit reads.
    pub fn to_trace(
        &self,
        f_star: f64,
        steps: StepStats,
        iterations: usize,
    ) -> Result<IterateTrace, CliError> {
        let t = self.column("t")?;
        let f_avg = self.column("f_avg")?;
        let qnorm = self.column("qnorm")?;
        let gap = self.column("dual_gap")?;
        let cols = self.constraint_columns();
        let mut trace = IterateTrace::new();
        for (i, row) in self.rows.iter().enumerate() {
            if !(t[i] >= 1.0 && t[i].fract() == 0.0) {
                return Err(CliError::Usage(format!(
                    "row {}: invalid iteration index {}",
                    i + 1,
                    t[i]
                )));
            }
            let empty = DVector::zeros(0);
            trace
                .push(TraceSample {
                    t: t[i] as usize,
                    x: empty.clone(),
                    x_avg: empty.clone(),
                    queue: empty.clone(),
                    multiplier: empty,
                    f_avg: f_avg[i],
                    g_avg: DVector::from_iterator(cols.len(), cols.iter().map(|&c| row[c])),
                    queue_norm: qnorm[i],
                    dual_value: f_star - gap[i],
                    lambda_dist: None,
                })
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        trace.steps = steps;
        trace.iterations = iterations;
        Ok(trace)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub algorithm: Variant,
    #[serde(rename = "V")]
    pub v: f64,
    pub q0: Vec<f64>,
    pub iters: usize,
    pub sampling: Sampling,
    /// Dual-subgradient step, when it differs from the default `1/V`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
}

impl ConfigEcho {
    pub fn from_config(c: &SolverConfig) -> Self {
        Self {
            algorithm: c.variant,
            v: c.v,
            q0: c.q0.iter().copied().collect(),
            iters: c.iters,
            sampling: c.sampling,
            step: c.step,
        }
    }

    pub fn to_config(&self) -> SolverConfig {
        let config = SolverConfig::new(self.v, self.q0.len(), self.iters, self.algorithm)
            .with_q0(DVector::from_vec(self.q0.clone()))
            .with_sampling(self.sampling);
        match self.step {
            Some(step) => config.with_step(step),
            None => config,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalErrors {
    pub t: usize,
    pub f_avg: f64,
    pub f_err: Option<f64>,
    pub max_violation: f64,
    pub qnorm: f64,
    pub lambda_dist: Option<f64>,
    pub dual_gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub problem: String,
    pub config: ConfigEcho,
    pub completed_iterations: usize,
    pub status: String,
    pub samples: usize,
    pub final_errors: Option<FinalErrors>,
    pub f_star: Option<f64>,
    pub steps: StepStats,
}

impl RunSummary {
    pub fn new(
        problem: &str,
        config: &SolverConfig,
        trace: &IterateTrace,
        reference: Option<&KktSolution>,
        status: &str,
    ) -> Self {
        let final_errors = trace.last().map(|s| FinalErrors {
            t: s.t,
            f_avg: s.f_avg,
            f_err: reference.map(|r| (s.f_avg - r.f_star).abs()),
            max_violation: s.g_avg.iter().fold(0.0, |acc: f64, g| acc.max(*g)),
            qnorm: s.queue_norm,
            lambda_dist: s.lambda_dist,
            dual_gap: reference.map(|r| r.f_star - s.dual_value),
        });
        Self {
            problem: problem.to_string(),
            config: ConfigEcho::from_config(config),
            completed_iterations: trace.iterations,
            status: status.to_string(),
            samples: trace.len(),
            final_errors,
            f_star: reference.map(|r| r.f_star),
            steps: trace.steps.clone(),
        }
    }
}

/// `trace.csv` -> `trace.summary.json`.
pub fn summary_path(csv: &Path) -> PathBuf {
    csv.with_extension("summary.json")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}
