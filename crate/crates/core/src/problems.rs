//! Built-in test instances and the JSON problem format.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dual::{gamma_geq_lc_check, lc_estimate, num_dual_hessian};
use crate::error::{Error, Result};
use crate::oracles::{
    InnerOracle, LogUtilityOracle, NumInstance, ProjectedGradientOracle, QpInstance,
    QuadraticOracle,
};
use crate::program::ProgramSpec;
use crate::reference::{kkt_solve_num, kkt_solve_qp, KktSolution, MAX_ENUMERATED_CONSTRAINTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Quoted from the published experiment.
    Paper,
    /// Derived from the instance data.
    Computed,
    /// Given in a problem file.
    Supplied,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constant {
    pub value: f64,
    pub provenance: Provenance,
}

impl Constant {
    fn new(value: f64, provenance: Provenance) -> Self {
        Self { value, provenance }
    }
}

/// Moduli used by the solver, each with its origin. `computed_*` always hold
/// the values derived from the data so discrepancies stay visible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    pub alpha: Constant,
    pub beta: Constant,
    /// Dual smoothness modulus.
    pub gamma: Constant,
    /// Values of `V` used in the published runs.
    pub v_values: Vec<f64>,
    pub computed_alpha: f64,
    pub computed_beta: f64,
    /// `||A||_F^2 / alpha` for linear constraints.
    pub computed_gamma: f64,
    /// Smallest curvature of `-q` at the reference multiplier, when the dual
    /// Hessian there is negative definite.
    pub lc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Instance {
    Num(NumInstance),
    Qp(QpInstance),
}

impl Instance {
    pub fn a(&self) -> &DMatrix<f64> {
        match self {
            Instance::Num(i) => &i.a,
            Instance::Qp(i) => &i.a,
        }
    }

    pub fn b(&self) -> &DVector<f64> {
        match self {
            Instance::Num(i) => &i.b,
            Instance::Qp(i) => &i.b,
        }
    }

    pub fn n(&self) -> usize {
        self.a().ncols()
    }

    pub fn m(&self) -> usize {
        self.a().nrows()
    }

    fn computed_alpha(&self) -> f64 {
        match self {
            Instance::Num(i) => i.computed_alpha(),
            Instance::Qp(i) => i.computed_alpha(),
        }
    }

    fn computed_beta(&self) -> f64 {
        match self {
            Instance::Num(i) => i.computed_beta(),
            Instance::Qp(i) => i.computed_beta(),
        }
    }

    fn program(&self, alpha: f64, beta: f64) -> Result<ProgramSpec> {
        match self {
            Instance::Num(i) => i.program(alpha, beta),
            Instance::Qp(i) => i.program(alpha, beta),
        }
    }

    fn oracle(&self) -> Result<Arc<dyn InnerOracle>> {
        Ok(match self {
            Instance::Num(i) => Arc::new(LogUtilityOracle::new(i.clone())),
            Instance::Qp(i) => Arc::new(QuadraticOracle::new(i.clone())?),
        })
    }

    pub fn solve_reference(&self) -> Result<KktSolution> {
        match self {
            Instance::Num(i) => kkt_solve_num(i),
            Instance::Qp(i) => kkt_solve_qp(i),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinTag {
    /// Three-flow, three-link network utility problem.
    Num61,
    /// Two-variable quadratic program.
    Qp62,
    /// Four-flow network whose routing matrix has rank 3.
    Num52RankDeficient,
}

impl BuiltinTag {
    pub const ALL: [BuiltinTag; 3] = [
        BuiltinTag::Num61,
        BuiltinTag::Qp62,
        BuiltinTag::Num52RankDeficient,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BuiltinTag::Num61 => "num_6_1",
            BuiltinTag::Qp62 => "qp_6_2",
            BuiltinTag::Num52RankDeficient => "num_5_2_rank_deficient",
        }
    }
}

impl fmt::Display for BuiltinTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BuiltinTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BuiltinTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown builtin problem '{s}'")))
    }
}

#[derive(Clone)]
pub struct ProblemBundle {
    pub tag: String,
    pub instance: Instance,
    pub program: ProgramSpec,
    pub oracle: Arc<dyn InnerOracle>,
    pub constants: ProblemConstants,
    pub reference: Option<KktSolution>,
    /// Why `reference` is missing, if it is.
    pub reference_error: Option<String>,
}

impl fmt::Debug for ProblemBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemBundle")
            .field("tag", &self.tag)
            .field("instance", &self.instance)
            .field("constants", &self.constants)
            .field("reference", &self.reference)
            .field("reference_error", &self.reference_error)
            .finish()
    }
}

impl ProblemBundle {
    fn assemble(
        tag: String,
        instance: Instance,
        alpha: Constant,
        beta: Constant,
        gamma: Option<Constant>,
        v_values: Vec<f64>,
    ) -> Result<Self> {
        for (name, c) in [("alpha", alpha), ("beta", beta)] {
            if !(c.value > 0.0 && c.value.is_finite()) {
                return Err(Error::Invalid(format!(
                    "{name} must be positive and finite, got {}",
                    c.value
                )));
            }
        }
        let program = instance.program(alpha.value, beta.value)?;
        let oracle = instance.oracle()?;
        let frob2 = instance.a().norm_squared();
        let computed_gamma = frob2 / alpha.value;
        let gamma = gamma.unwrap_or(Constant::new(computed_gamma, Provenance::Computed));

        let (reference, reference_error) = if instance.m() > MAX_ENUMERATED_CONSTRAINTS {
            (
                None,
                Some(format!(
                    "more than {MAX_ENUMERATED_CONSTRAINTS} constraints"
                )),
            )
        } else {
            match instance.solve_reference() {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            }
        };

        let lc = reference
            .as_ref()
            .and_then(|r| dual_curvature(&instance, &r.lambda_star));
        if let Some(lc) = lc {
            if !gamma_geq_lc_check(gamma.value, lc) {
                return Err(Error::Invalid(format!(
                    "smoothness modulus {} is below the dual curvature {lc}",
                    gamma.value
                )));
            }
        }

        let constants = ProblemConstants {
            alpha,
            beta,
            gamma,
            v_values,
            computed_alpha: instance.computed_alpha(),
            computed_beta: instance.computed_beta(),
            computed_gamma: frob2 / instance.computed_alpha(),
            lc,
        };
        Ok(Self {
            tag,
            instance,
            program,
            oracle,
            constants,
            reference,
            reference_error,
        })
    }

    pub fn reference(&self) -> Result<&KktSolution> {
        self.reference.as_ref().ok_or_else(|| {
            Error::Precondition(format!(
                "problem '{}' has no reference solution: {}",
                self.tag,
                self.reference_error.as_deref().unwrap_or("unknown reason")
            ))
        })
    }

    /// Projected-gradient oracle for the same program, for cross-checks.
    pub fn generic_oracle(&self) -> ProjectedGradientOracle {
        ProjectedGradientOracle::new(self.program.clone())
    }

    pub fn to_file(&self) -> ProblemFile {
        let a = matrix_rows(self.instance.a());
        let b = self.instance.b().iter().copied().collect();
        let (kind, c, p, xmax) = match &self.instance {
            Instance::Num(i) => (
                "num",
                i.c.iter().copied().collect(),
                None,
                Some(i.xmax.iter().copied().collect()),
            ),
            Instance::Qp(i) => (
                "qp",
                i.c.iter().copied().collect(),
                Some(matrix_rows(&i.p)),
                None,
            ),
        };
        ProblemFile {
            kind: kind.into(),
            a,
            b,
            c,
            p,
            xmax,
            alpha: Some(self.constants.alpha.value),
            beta: Some(self.constants.beta.value),
            gamma: Some(self.constants.gamma.value),
            v_values: (!self.constants.v_values.is_empty())
                .then(|| self.constants.v_values.clone()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }
}

/// Curvature of `-q` at `lambda`, where the dual Hessian is available in
/// closed form.
fn dual_curvature(instance: &Instance, lambda: &DVector<f64>) -> Option<f64> {
    let h = match instance {
        Instance::Num(i) => num_dual_hessian(i, lambda).ok()?,
        Instance::Qp(i) => {
            let chol = (2.0 * &i.p).cholesky()?;
            -(&i.a * chol.solve(&i.a.transpose()))
        }
    };
    lc_estimate(&h)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(what: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(Error::Invalid(format!("{what} must be a nonempty matrix")));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != nc) {
        return Err(Error::Invalid(format!(
            "{what} row {r} has {} entries, expected {nc}",
            rows[r].len()
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// On-disk problem description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub kind: String,
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    #[serde(rename = "P", default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xmax: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_values: Option<Vec<f64>>,
}

impl ProblemFile {
    pub fn into_bundle(self, tag: String) -> Result<ProblemBundle> {
        let a = matrix_from_rows("A", &self.a)?;
        let b = DVector::from_vec(self.b);
        let c = DVector::from_vec(self.c);
        let instance = match self.kind.as_str() {
            "num" => {
                if self.p.is_some() {
                    return Err(Error::Invalid("'P' is only valid for kind \"qp\"".into()));
                }
                let xmax = self
                    .xmax
                    .ok_or_else(|| Error::Invalid("kind \"num\" requires 'xmax'".into()))?;
                Instance::Num(NumInstance::new(c, a, b, DVector::from_vec(xmax))?)
            }
            "qp" => {
                if self.xmax.is_some() {
                    return Err(Error::Invalid(
                        "'xmax' is only valid for kind \"num\"".into(),
                    ));
                }
                let p = self
                    .p
                    .ok_or_else(|| Error::Invalid("kind \"qp\" requires 'P'".into()))?;
                Instance::Qp(QpInstance::new(matrix_from_rows("P", &p)?, c, a, b)?)
            }
            other => return Err(Error::Invalid(format!("unknown problem kind '{other}'"))),
        };
        let pick = |given: Option<f64>, computed: f64| match given {
            Some(v) => Constant::new(v, Provenance::Supplied),
            None => Constant::new(computed, Provenance::Computed),
        };
        let alpha = pick(self.alpha, instance.computed_alpha());
        let beta = pick(self.beta, instance.computed_beta());
        let gamma = self.gamma.map(|g| Constant::new(g, Provenance::Supplied));
        ProblemBundle::assemble(
            tag,
            instance,
            alpha,
            beta,
            gamma,
            self.v_values.unwrap_or_default(),
        )
    }
}

pub fn parse_problem(json: &str, tag: &str) -> Result<ProblemBundle> {
    let file: ProblemFile = serde_json::from_str(json)?;
    file.into_bundle(tag.to_string())
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<ProblemBundle> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let tag = path.file_stem().map_or_else(
        || "problem".to_string(),
        |s| s.to_string_lossy().into_owned(),
    );
    parse_problem(&text, &tag)
}

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(v)
}

pub fn builtin(tag: BuiltinTag) -> Result<ProblemBundle> {
    let paper = |v| Constant::new(v, Provenance::Paper);
    match tag {
        BuiltinTag::Num61 => {
            let a = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
            let inst = NumInstance::new(
                dv(&[1.0, 2.0, 3.0]),
                a,
                dv(&[10.0, 8.0, 8.0]),
                dv(&[11.0; 3]),
            )?;
            ProblemBundle::assemble(
                tag.to_string(),
                Instance::Num(inst),
                paper(2.0 / 121.0),
                paper(3f64.sqrt()),
                Some(paper(422.0)),
                vec![363.0, 422.0],
            )
        }
        BuiltinTag::Qp62 => {
            let inst = QpInstance::new(
                DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]),
                dv(&[1.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
                dv(&[-2.0, -1.0]),
            )?;
            ProblemBundle::assemble(
                tag.to_string(),
                Instance::Qp(inst),
                paper(0.34),
                paper(2f64.sqrt()),
                Some(paper(9.0)),
                vec![4.0 / 0.34],
            )
        }
        BuiltinTag::Num52RankDeficient => {
            let a = DMatrix::from_row_slice(
                4,
                4,
                &[
                    1.0, 1.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, 1.0, //
                    1.0, 0.0, 1.0, 0.0, //
                    0.0, 1.0, 0.0, 1.0,
                ],
            );
            let inst =
                NumInstance::new(dv(&[1.0; 4]), a, dv(&[3.0, 7.0, 2.0, 8.0]), dv(&[9.0; 4]))?;
            let instance = Instance::Num(inst);
            let alpha = Constant::new(instance.computed_alpha(), Provenance::Computed);
            let beta = Constant::new(instance.computed_beta(), Provenance::Computed);
            ProblemBundle::assemble(tag.to_string(), instance, alpha, beta, None, Vec::new())
        }
    }
}

pub fn builtin_by_name(name: &str) -> Result<ProblemBundle> {
    builtin(name.parse()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for t in BuiltinTag::ALL {
            assert_eq!(t.as_str().parse::<BuiltinTag>().unwrap(), t);
        }
        assert!("num_6_3".parse::<BuiltinTag>().is_err());
    }

    #[test]
    fn num61_constants_keep_provenance() {
        let b = builtin(BuiltinTag::Num61).unwrap();
        assert_eq!(b.constants.alpha.provenance, Provenance::Paper);
        assert!((b.constants.alpha.value - 2.0 / 121.0).abs() < 1e-15);
        assert!((b.constants.computed_alpha - 1.0 / 121.0).abs() < 1e-15);
        assert_eq!(b.constants.gamma.value, 422.0);
        assert!((b.constants.computed_gamma - 7.0 * 121.0).abs() < 1e-9);
        assert!(
            (b.constants.alpha.value * b.constants.gamma.value - 2.0 / 121.0 * 422.0).abs() < 1e-12
        );
        let r = b.reference.unwrap();
        assert!((r.f_star + 7.725297).abs() < 1e-5);
    }

    #[test]
    fn qp62_reference() {
        let b = builtin(BuiltinTag::Qp62).unwrap();
        let r = b.reference.as_ref().unwrap();
        assert!((&r.x_star - dv(&[-1.0, -1.0])).norm() < 1e-9);
        assert!((r.f_star - 8.0).abs() < 1e-9);
        assert!((b.constants.computed_alpha - (6.0 - 32f64.sqrt())).abs() < 1e-12);
        assert!((b.constants.lc.unwrap() - (1.5 - 1.25f64.sqrt()) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_cap_exceeds_capacities() {
        let b = builtin(BuiltinTag::Num52RankDeficient).unwrap();
        assert!(b.reference.is_some());
        assert_eq!(b.constants.gamma.provenance, Provenance::Computed);
    }

    #[test]
    fn json_rejects_low_caps_and_garbage() {
        let low = r#"{"kind":"num","A":[[1,1]],"b":[5],"c":[1,1],"xmax":[5,6]}"#;
        assert!(matches!(parse_problem(low, "x"), Err(Error::Invalid(_))));
        assert!(matches!(
            parse_problem("{\"kind\":", "x"),
            Err(Error::Parse(_))
        ));
        let wrong = r#"{"kind":"lp","A":[[1]],"b":[1],"c":[1]}"#;
        assert!(matches!(parse_problem(wrong, "x"), Err(Error::Invalid(_))));
    }

    #[test]
    fn loaded_qp_defaults_to_computed_moduli() {
        let text = r#"{"kind":"qp","A":[[1,1],[0,1]],"b":[-2,-1],"c":[1,1],"P":[[1,2],[2,5]]}"#;
        let b = parse_problem(text, "qp").unwrap();
        assert_eq!(b.constants.alpha.provenance, Provenance::Computed);
        assert!((b.constants.beta.value - 2f64.sqrt()).abs() < 1e-15);
        assert!((b.constants.gamma.value - 3.0 / b.constants.alpha.value).abs() < 1e-12);
    }
}
