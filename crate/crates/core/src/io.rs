//! Problem files, validation diagnostics and plot-ready CSV.
//!
//! A problem file is a JSON object with a `kind` field, the payload fields
//! of that kind and an optional `options` object:
//!
//! ```json
//! {"kind": "assignment", "theta": [[1, 2], [3, 4]], "options": {"seed": 7}}
//! ```

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::discrete_ot::{Balance, Sense};
use crate::error::{Error, Result};
use crate::games::CoalitionGame;
use crate::interpolated::{CostPair, SiteSet};
use crate::matching::Proposing;
use crate::measures::{CapacitySpec, DiscreteMeasure, FieldValues, PartitionLabeling, UtilityField};
use crate::multipartition::{Mode, RegionPoint};
use crate::semidiscrete::Dynamics;

/// Utility table given either as a bare matrix or as a parametric field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldInput {
    Matrix(Vec<Vec<f64>>),
    Field(UtilityField),
}

impl FieldInput {
    pub fn evaluate(&self, mu: &DiscreteMeasure) -> Result<FieldValues> {
        match self {
            FieldInput::Matrix(v) => UtilityField::matrix(v.clone()).evaluate(mu),
            FieldInput::Field(f) => f.evaluate(mu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentProblem {
    pub theta: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KantorovichProblem {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    /// Payoff matrix; the metric commands use the coordinates instead.
    #[serde(default)]
    pub theta: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub sense: Sense,
    #[serde(default)]
    pub balance: Balance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarriageProblem {
    #[serde(default)]
    pub theta_m: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub theta_w: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub men: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub women: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub proposing: Proposing,
    /// Matching to audit, `tau[man] = woman`.
    #[serde(default)]
    pub tau: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionProblem {
    pub mu: DiscreteMeasure,
    #[serde(default)]
    pub theta: Option<FieldInput>,
    #[serde(default)]
    pub m: Option<CapacitySpec>,
    /// Candidate and firm utilities for the stable partition.
    #[serde(default)]
    pub phi: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub psi: Option<Vec<Vec<f64>>>,
    /// Prices, for evaluation or as the start of the dynamics.
    #[serde(default)]
    pub prices: Option<Vec<f64>>,
    /// Commissions in `[0, 1)`.
    #[serde(default)]
    pub commissions: Option<Vec<f64>>,
}

fn default_mode() -> Mode {
    Mode::Partition
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiProblem {
    pub mu: DiscreteMeasure,
    /// `zeta[x]`, one simplex vector per atom.
    #[serde(default)]
    pub zeta: Option<Vec<Vec<f64>>>,
    /// `m[i][j]`, one row per agent.
    #[serde(default)]
    pub m: Option<Vec<Vec<f64>>>,
    /// Second capacity matrix for the dominance test.
    #[serde(default)]
    pub m2: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub theta: Option<FieldInput>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Share of the first good per atom, for the two nations region.
    #[serde(default)]
    pub share: Option<Vec<f64>>,
    #[serde(default)]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpProblem {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    #[serde(default)]
    pub sites: Option<SiteSet>,
    #[serde(default)]
    pub costs: Option<CostPair>,
    /// Interpolation time for the displacement interpolation.
    #[serde(default)]
    pub s: Option<f64>,
}

/// Tunables shared by the commands; command line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Options {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub k_max: Option<usize>,
}

/// The problem kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Assignment,
    Kantorovich,
    Marriage,
    Partition,
    Multipartition,
    Interp,
    Game,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Assignment => "assignment",
            Kind::Kantorovich => "kantorovich",
            Kind::Marriage => "marriage",
            Kind::Partition => "partition",
            Kind::Multipartition => "multipartition",
            Kind::Interp => "interp",
            Kind::Game => "game",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Problem {
    Assignment(AssignmentProblem),
    Kantorovich(KantorovichProblem),
    Marriage(MarriageProblem),
    Partition(PartitionProblem),
    Multipartition(MultiProblem),
    Interp(InterpProblem),
    Game(CoalitionGame),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemFile {
    pub problem: Problem,
    pub options: Options,
}

fn schema<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T> {
    T::deserialize(v).map_err(|e| Error::InvalidInput(e.to_string()))
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Self::from_value(&v)
    }

    pub fn from_value(v: &Value) -> Result<Self> {
        let kind: Kind = schema(v.get("kind").ok_or_else(|| Error::InvalidInput("missing field `kind`".into()))?)?;
        Self::with_kind(kind, v)
    }

    /// Reads the payload as `kind` whatever the `kind` field says.
    pub fn with_kind(kind: Kind, v: &Value) -> Result<Self> {
        let options = match v.get("options") {
            Some(o) => schema(o)?,
            None => Options::default(),
        };
        let problem = match kind {
            Kind::Assignment => Problem::Assignment(schema(v)?),
            Kind::Kantorovich => Problem::Kantorovich(schema(v)?),
            Kind::Marriage => Problem::Marriage(schema(v)?),
            Kind::Partition => Problem::Partition(schema(v)?),
            Kind::Multipartition => Problem::Multipartition(schema(v)?),
            Kind::Interp => Problem::Interp(schema(v)?),
            Kind::Game => Problem::Game(schema(v)?),
        };
        Ok(ProblemFile { problem, options })
    }

    pub fn kind(&self) -> Kind {
        match self.problem {
            Problem::Assignment(_) => Kind::Assignment,
            Problem::Kantorovich(_) => Kind::Kantorovich,
            Problem::Marriage(_) => Kind::Marriage,
            Problem::Partition(_) => Kind::Partition,
            Problem::Multipartition(_) => Kind::Multipartition,
            Problem::Interp(_) => Kind::Interp,
            Problem::Game(_) => Kind::Game,
        }
    }
}

/// One finding of [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// `schema`, `negative-weight`, `balance`, `order`, `dimension` or
    /// `capacity`.
    pub code: String,
    /// JSON path of the offending value.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atom: Option<usize>,
    pub message: String,
}

fn diag(code: &str, path: &str, atom: Option<usize>, message: String) -> Diagnostic {
    Diagnostic { code: code.into(), path: path.into(), atom, message }
}

/// Reports schema violations and broken invariants of a problem file. An
/// empty list means the file is usable.
pub fn validate(text: &str) -> Vec<Diagnostic> {
    let v: Value = match serde_json::from_str(text) {
        Ok(v) => v,
        Err(e) => return vec![diag("schema", "", None, format!("not valid JSON: {e}"))],
    };
    let mut out = Vec::new();
    for key in ["mu", "nu"] {
        if let Some(ws) = v.get(key).and_then(|m| m.get("weights")).and_then(Value::as_array) {
            for (k, w) in ws.iter().enumerate() {
                match w.as_f64() {
                    Some(x) if x < 0.0 => out.push(diag(
                        "negative-weight",
                        &format!("{key}.weights[{k}]"),
                        Some(k),
                        format!("atom {k} of {key} has negative weight {x}"),
                    )),
                    Some(x) if !x.is_finite() => {
                        out.push(diag("schema", &format!("{key}.weights[{k}]"), Some(k), "weight is not finite".into()))
                    }
                    None => out.push(diag("schema", &format!("{key}.weights[{k}]"), Some(k), "weight is not a number".into())),
                    _ => {}
                }
            }
        }
    }
    if !out.is_empty() {
        return out;
    }
    let file = match ProblemFile::from_value(&v) {
        Ok(f) => f,
        Err(e) => {
            out.push(diag("schema", "", None, e.to_string()));
            return out;
        }
    };
    match &file.problem {
        Problem::Assignment(a) => square(&mut out, "theta", &a.theta),
        Problem::Kantorovich(k) => {
            if k.balance == Balance::Balanced {
                let (a, b) = (k.mu.total_mass(), k.nu.total_mass());
                if (a - b).abs() > 1e-9 {
                    out.push(diag(
                        "balance",
                        "balance",
                        None,
                        format!("balanced transport needs mu(X) = nu(Y), got {a} and {b}; use balance \"relaxed\""),
                    ));
                }
            }
            if let Some(t) = &k.theta {
                shape(&mut out, "theta", t, k.mu.len(), k.nu.len());
            }
        }
        Problem::Marriage(m) => {
            if let (Some(a), Some(b)) = (&m.theta_m, &m.theta_w) {
                square(&mut out, "theta_m", a);
                square(&mut out, "theta_w", b);
                if a.len() != b.len() {
                    out.push(diag("dimension", "theta_w", None, "theta_m and theta_w differ in size".into()));
                }
            } else if m.men.is_none() || m.women.is_none() {
                out.push(diag("schema", "", None, "give theta_m and theta_w or men and women".into()));
            }
        }
        Problem::Partition(p) => {
            if let Some(FieldInput::Field(f @ UtilityField::Scaled { .. })) = &p.theta {
                if let Err(e) = f.check_ordered_scales() {
                    out.push(diag("order", "theta.lambda", None, e.to_string()));
                }
            }
            let n_caps = p.m.as_ref().map(|m| m.len());
            match p.theta.as_ref().map(|t| t.evaluate(&p.mu)) {
                Some(Ok(t)) if n_caps.is_some_and(|k| k != t.n_agents()) => out.push(diag(
                    "dimension",
                    "m",
                    None,
                    format!("{} capacities for {} agents", n_caps.unwrap_or(0), t.n_agents()),
                )),
                Some(Err(e)) => out.push(diag("dimension", "theta", None, e.to_string())),
                _ => {}
            }
            if let Some(k) = p.m.as_ref().and_then(|m| m.m.iter().position(|v| !(*v >= 0.0))) {
                out.push(diag("capacity", &format!("m.m[{k}]"), None, "capacity must be nonnegative".into()));
            }
        }
        Problem::Multipartition(p) => {
            if let Some(z) = &p.zeta {
                if z.len() != p.mu.len() {
                    out.push(diag("dimension", "zeta", None, format!("{} rows for {} atoms", z.len(), p.mu.len())));
                }
                for (x, row) in z.iter().enumerate() {
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-12 {
                        out.push(diag("schema", &format!("zeta[{x}]"), Some(x), "row is not a probability vector".into()));
                    }
                }
            }
        }
        Problem::Interp(p) => {
            if (p.mu.total_mass() - p.nu.total_mass()).abs() > 1e-9 {
                out.push(diag(
                    "balance",
                    "nu",
                    None,
                    format!("mu(X) = {} and nu(Y) = {} differ", p.mu.total_mass(), p.nu.total_mass()),
                ));
            }
        }
        Problem::Game(_) => {}
    }
    out
}

fn square(out: &mut Vec<Diagnostic>, path: &str, t: &[Vec<f64>]) {
    if let Some(i) = t.iter().position(|r| r.len() != t.len()) {
        out.push(diag("dimension", &format!("{path}[{i}]"), None, format!("matrix is not square ({} rows)", t.len())));
    }
}

fn shape(out: &mut Vec<Diagnostic>, path: &str, t: &[Vec<f64>], rows: usize, cols: usize) {
    if t.len() != rows || t.iter().any(|r| r.len() != cols) {
        out.push(diag("dimension", path, None, format!("expected a {rows} x {cols} matrix")));
    }
}

/// Comma separated table with a header line.
pub fn csv_table(header: &[&str], rows: &[Vec<f64>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// `atom,id,label` lines; label 0 is unassigned.
pub fn labeling_csv(l: &PartitionLabeling, mu: &DiscreteMeasure) -> String {
    let mut s = String::from("atom,id,label\n");
    for (k, lab) in l.labels.iter().enumerate() {
        s.push_str(&format!("{k},{},{lab}\n", mu.ids()[k]));
    }
    s
}

/// `step,t,p1..pN,lyapunov` lines of a price trajectory.
pub fn dynamics_csv(d: &Dynamics, dt: f64) -> String {
    let n = d.trajectory.first().map_or(0, |p| p.len());
    let mut s = String::from("step,t");
    for i in 1..=n {
        s.push_str(&format!(",p{i}"));
    }
    s.push_str(",lyapunov\n");
    for (k, p) in d.trajectory.iter().enumerate() {
        s.push_str(&format!("{k},{}", k as f64 * dt));
        for v in p {
            s.push_str(&format!(",{v}"));
        }
        match d.lyapunov.get(k) {
            Some(l) => s.push_str(&format!(",{l}\n")),
            None => s.push_str(",\n"),
        }
    }
    s
}

/// `r,mJ,mP` lines of the two nations boundary.
pub fn region_points_csv(points: &[RegionPoint]) -> String {
    crate::multipartition::region_csv(points)
}
