//! Measures, utility fields, capacities and labelings.
//!
//! Everything here is immutable after construction and cheap to share.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights below this value are dropped when a measure is built.
pub const PRUNE_WEIGHT: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MeasureRepr {
    dim: usize,
    #[serde(default)]
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ids: Option<Vec<usize>>,
}

/// A finitely supported nonnegative measure.
///
/// Atoms carry an integer id (their index in the input before pruning) and,
/// when `dim > 0`, a coordinate vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MeasureRepr", into = "MeasureRepr")]
pub struct DiscreteMeasure {
    dim: usize,
    ids: Vec<usize>,
    points: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl TryFrom<MeasureRepr> for DiscreteMeasure {
    type Error = Error;

    fn try_from(r: MeasureRepr) -> Result<Self> {
        let mut m = DiscreteMeasure::new(r.dim, r.points, r.weights)?;
        if let Some(ids) = r.ids {
            if ids.len() == m.ids.len() {
                m.ids = ids;
            }
        }
        Ok(m)
    }
}

impl From<DiscreteMeasure> for MeasureRepr {
    fn from(m: DiscreteMeasure) -> Self {
        let sequential = m.ids.iter().enumerate().all(|(k, &id)| k == id);
        MeasureRepr {
            dim: m.dim,
            points: m.points,
            weights: m.weights,
            ids: if sequential { None } else { Some(m.ids) },
        }
    }
}

impl DiscreteMeasure {
    /// Builds a measure from coordinates and weights.
    ///
    /// With `dim == 0` the points may be left empty. Weights below
    /// [`PRUNE_WEIGHT`] are pruned; the surviving atoms keep their original
    /// index as id.
    pub fn new(dim: usize, points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if dim > 0 && points.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if dim == 0 && !points.is_empty() && points.len() != weights.len() {
            return Err(Error::Dimension(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        for (k, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::InvalidInput(format!("weight {k} is not finite")));
            }
            if w < 0.0 {
                return Err(Error::NegativeWeight { index: k, weight: w });
            }
        }
        if dim > 0 {
            for (k, p) in points.iter().enumerate() {
                if p.len() != dim {
                    return Err(Error::Dimension(format!(
                        "point {k} has {} coordinates, expected {dim}",
                        p.len()
                    )));
                }
                if p.iter().any(|c| !c.is_finite()) {
                    return Err(Error::InvalidInput(format!("point {k} is not finite")));
                }
            }
        }
        let keep_points = dim > 0 || !points.is_empty();
        let mut ids = Vec::with_capacity(weights.len());
        let mut pts = Vec::new();
        let mut ws = Vec::with_capacity(weights.len());
        for (k, &w) in weights.iter().enumerate() {
            if w < PRUNE_WEIGHT {
                continue;
            }
            ids.push(k);
            ws.push(w);
            if keep_points {
                pts.push(points[k].clone());
            }
        }
        Ok(DiscreteMeasure { dim, ids, points: pts, weights: ws })
    }

    /// Abstract measure on ids `0..n` without coordinates.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        Self::new(0, Vec::new(), weights)
    }

    /// Points in `R^1` with the given weights.
    pub fn on_line(xs: &[f64], weights: Vec<f64>) -> Result<Self> {
        Self::new(1, xs.iter().map(|&x| vec![x]).collect(), weights)
    }

    /// Equal weights `total / n` on the given points.
    pub fn uniform(points: Vec<Vec<f64>>, total: f64) -> Result<Self> {
        let n = points.len();
        let dim = points.first().map_or(0, |p| p.len());
        let w = if n == 0 { 0.0 } else { total / n as f64 };
        Self::new(dim, points, vec![w; n])
    }

    pub fn empty(dim: usize) -> Self {
        DiscreteMeasure { dim, ids: Vec::new(), points: Vec::new(), weights: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn has_coordinates(&self) -> bool {
        !self.points.is_empty() || self.weights.is_empty()
    }

    /// Coordinates of atom `k`. Empty for abstract measures.
    pub fn point(&self, k: usize) -> &[f64] {
        self.points.get(k).map_or(&[], |p| p.as_slice())
    }

    /// First coordinate of every atom (line measures).
    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.first().copied().unwrap_or(0.0)).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(0.0, f64::max)
    }

    /// Integral of a per-atom function.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    /// Same support with weights multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(
            self.dim,
            self.points.clone(),
            self.weights.iter().map(|w| w * s).collect(),
        )
    }

    /// Sub-measure on the listed atoms, keeping their ids.
    pub fn select(&self, atoms: &[usize]) -> Self {
        DiscreteMeasure {
            dim: self.dim,
            ids: atoms.iter().map(|&k| self.ids[k]).collect(),
            points: if self.points.is_empty() {
                Vec::new()
            } else {
                atoms.iter().map(|&k| self.points[k].clone()).collect()
            },
            weights: atoms.iter().map(|&k| self.weights[k]).collect(),
        }
    }
}

/// Sum of the weights.
pub fn total_mass(mu: &DiscreteMeasure) -> f64 {
    mu.total_mass()
}

/// Midpoint-rule discretization of a density on the box `[a, b]^d`.
///
/// Each of the `n^d` cells becomes an atom at its center with weight
/// `f(center) * cell volume`.
pub fn discretize_density<F>(f: F, a: f64, b: f64, dim: usize, n: usize) -> Result<DiscreteMeasure>
where
    F: Fn(&[f64]) -> f64,
{
    if n < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 atoms per axis, got {n}")));
    }
    if dim == 0 || !(b > a) {
        return Err(Error::InvalidInput("empty box".into()));
    }
    let h = (b - a) / n as f64;
    let vol = h.powi(dim as i32);
    let total = n.checked_pow(dim as u32).ok_or_else(|| Error::InvalidInput("grid too large".into()))?;
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let x: Vec<f64> = idx.iter().map(|&k| a + (k as f64 + 0.5) * h).collect();
        let v = f(&x);
        if !(v >= 0.0) {
            return Err(Error::InvalidInput(format!("density is negative or undefined at {x:?}")));
        }
        weights.push(v * vol);
        points.push(x);
        for c in idx.iter_mut().rev() {
            *c += 1;
            if *c < n {
                break;
            }
            *c = 0;
        }
    }
    // keep zero-density cells as atoms only if they carry mass
    DiscreteMeasure::new(dim, points, weights)
}

/// Whether capacities have to be met exactly or only bounded above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CapacityMode {
    Exact,
    #[default]
    AtMost,
}

/// Agent capacities `m_i` together with how they bind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySpec {
    pub m: Vec<f64>,
    #[serde(default)]
    pub mode: CapacityMode,
}

impl CapacitySpec {
    pub fn new(m: Vec<f64>, mode: CapacityMode) -> Result<Self> {
        for (i, &v) in m.iter().enumerate() {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("capacity {i} must be nonnegative, got {v}")));
            }
        }
        Ok(CapacitySpec { m, mode })
    }

    pub fn exact(m: Vec<f64>) -> Result<Self> {
        Self::new(m, CapacityMode::Exact)
    }

    pub fn at_most(m: Vec<f64>) -> Result<Self> {
        Self::new(m, CapacityMode::AtMost)
    }

    pub fn total(&self) -> f64 {
        self.m.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

/// Saturation regime of a capacity vector relative to the available mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Under saturated: `sum m < mu(X)`.
    US,
    /// Saturated: `sum m = mu(X)`.
    S,
    /// Over saturated: `sum m > mu(X)`.
    OS,
}

/// Compares `sum m` with `mu(X)` at relative tolerance `1e-12`.
pub fn classify_regime(m: &CapacitySpec, mu: &DiscreteMeasure) -> Regime {
    regime_of(m.total(), mu.total_mass())
}

pub(crate) fn regime_of(total_m: f64, mass: f64) -> Regime {
    let tol = 1e-12 * mass.abs().max(total_m.abs()).max(1.0);
    if (total_m - mass).abs() <= tol {
        Regime::S
    } else if total_m < mass {
        Regime::US
    } else {
        Regime::OS
    }
}

/// Label per atom in `0..=N`; label 0 means unassigned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLabeling {
    pub n_agents: usize,
    pub labels: Vec<usize>,
}

impl PartitionLabeling {
    pub fn new(n_agents: usize, labels: Vec<usize>) -> Result<Self> {
        if let Some((k, &l)) = labels.iter().enumerate().find(|(_, &l)| l > n_agents) {
            return Err(Error::InvalidInput(format!("label {l} at atom {k} exceeds {n_agents} agents")));
        }
        Ok(PartitionLabeling { n_agents, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Masses per label, index 0 is the unassigned mass.
    pub fn masses(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.n_agents + 1];
        for (&l, &w) in self.labels.iter().zip(mu.weights()) {
            out[l] += w;
        }
        out
    }

    /// Masses of agents `1..=N` as a vector of length `N`.
    pub fn agent_masses(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        self.masses(mu)[1..].to_vec()
    }

    /// Atoms carrying label `i`.
    pub fn atoms_of(&self, i: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &l)| l == i).map(|(k, _)| k).collect()
    }
}

/// Atoms of `mu` carrying label `i`, with their weights.
pub fn restrict(mu: &DiscreteMeasure, labeling: &PartitionLabeling, i: usize) -> Result<DiscreteMeasure> {
    if labeling.len() != mu.len() {
        return Err(Error::Dimension(format!(
            "labeling has {} entries, measure has {} atoms",
            labeling.len(),
            mu.len()
        )));
    }
    if i > labeling.n_agents {
        return Err(Error::InvalidInput(format!("label {i} out of range 0..={}", labeling.n_agents)));
    }
    Ok(mu.select(&labeling.atoms_of(i)))
}

/// Fractional allocation: `gamma[x][i]` is the share of atom `x` given to
/// agent `i + 1`. Row sums are at most one; the rest is unassigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakPartition {
    pub n_agents: usize,
    pub gamma: Vec<Vec<f64>>,
}

impl WeakPartition {
    pub fn new(n_agents: usize, gamma: Vec<Vec<f64>>) -> Result<Self> {
        for (k, row) in gamma.iter().enumerate() {
            if row.len() != n_agents {
                return Err(Error::Dimension(format!("row {k} has {} entries", row.len())));
            }
            if row.iter().any(|&g| g < 0.0 || !g.is_finite()) {
                return Err(Error::InvalidInput(format!("row {k} has a negative share")));
            }
            if row.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::InvalidInput(format!("row {k} allocates more than the atom")));
            }
        }
        Ok(WeakPartition { n_agents, gamma })
    }

    /// Indicator allocation of a strong labeling.
    pub fn from_labeling(l: &PartitionLabeling) -> Self {
        let gamma = l
            .labels
            .iter()
            .map(|&lab| {
                let mut row = vec![0.0; l.n_agents];
                if lab > 0 {
                    row[lab - 1] = 1.0;
                }
                row
            })
            .collect();
        WeakPartition { n_agents: l.n_agents, gamma }
    }

    /// `mu_i(X)` for each agent.
    pub fn masses(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        let mut out = vec![0.0; self.n_agents];
        for (row, &w) in self.gamma.iter().zip(mu.weights()) {
            for (o, g) in out.iter_mut().zip(row) {
                *o += w * g;
            }
        }
        out
    }

    /// `sum_i mu_i(theta_i)` for each agent separately.
    pub fn values(&self, mu: &DiscreteMeasure, theta: &FieldValues) -> Vec<f64> {
        let mut out = vec![0.0; self.n_agents];
        for (x, (row, &w)) in self.gamma.iter().zip(mu.weights()).enumerate() {
            for (i, g) in row.iter().enumerate() {
                if *g > 0.0 {
                    out[i] += w * g * theta.get(i, x);
                }
            }
        }
        out
    }
}

/// Utility of each agent at each support point, in one of several
/// parametric forms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UtilityField {
    /// `values[i][x]`, one row per agent.
    Matrix { values: Vec<Vec<f64>> },
    /// `lambda_i * base(x)`.
    Scaled { lambda: Vec<f64>, base: Vec<f64> },
    /// `-|x - y_i|^2` with agent sites `y_i`.
    Quadratic { sites: Vec<Vec<f64>> },
    /// `x . y_i`.
    Dot { sites: Vec<Vec<f64>> },
    /// `lambda - |x - y_i|`.
    Metric { lambda: f64, sites: Vec<Vec<f64>> },
}

impl UtilityField {
    pub fn matrix(values: Vec<Vec<f64>>) -> Self {
        UtilityField::Matrix { values }
    }

    pub fn scaled(lambda: Vec<f64>, base: Vec<f64>) -> Self {
        UtilityField::Scaled { lambda, base }
    }

    pub fn n_agents(&self) -> usize {
        match self {
            UtilityField::Matrix { values } => values.len(),
            UtilityField::Scaled { lambda, .. } => lambda.len(),
            UtilityField::Quadratic { sites } | UtilityField::Dot { sites } => sites.len(),
            UtilityField::Metric { sites, .. } => sites.len(),
        }
    }

    /// Checks `0 < lambda_1 < ... < lambda_N` for the scaled kind.
    pub fn check_ordered_scales(&self) -> Result<()> {
        if let UtilityField::Scaled { lambda, .. } = self {
            check_increasing(lambda)
        } else {
            Err(Error::InvalidInput("field is not a scaled family".into()))
        }
    }

    /// Resolves the field on the support of `mu`.
    pub fn evaluate(&self, mu: &DiscreteMeasure) -> Result<FieldValues> {
        let n = mu.len();
        let sites_check = |sites: &Vec<Vec<f64>>| -> Result<()> {
            if n > 0 && !mu.has_coordinates() {
                return Err(Error::Dimension("geometric field needs coordinates".into()));
            }
            if sites.iter().any(|s| s.len() != mu.dim()) {
                return Err(Error::Dimension("site dimension differs from the measure".into()));
            }
            Ok(())
        };
        let rows: Vec<Vec<f64>> = match self {
            UtilityField::Matrix { values } => {
                if let Some((i, r)) = values.iter().enumerate().find(|(_, r)| r.len() != n) {
                    return Err(Error::Dimension(format!("row {i} has {} values for {n} atoms", r.len())));
                }
                values.clone()
            }
            UtilityField::Scaled { lambda, base } => {
                if base.len() != n {
                    return Err(Error::Dimension(format!("base has {} values for {n} atoms", base.len())));
                }
                lambda.iter().map(|l| base.iter().map(|b| l * b).collect()).collect()
            }
            UtilityField::Quadratic { sites } => {
                sites_check(sites)?;
                sites.iter().map(|y| (0..n).map(|k| -sq_dist(mu.point(k), y)).collect()).collect()
            }
            UtilityField::Dot { sites } => {
                sites_check(sites)?;
                sites
                    .iter()
                    .map(|y| (0..n).map(|k| mu.point(k).iter().zip(y).map(|(a, b)| a * b).sum()).collect())
                    .collect()
            }
            UtilityField::Metric { lambda, sites } => {
                sites_check(sites)?;
                sites.iter().map(|y| (0..n).map(|k| lambda - sq_dist(mu.point(k), y).sqrt()).collect()).collect()
            }
        };
        FieldValues::from_rows(&rows)
    }
}

pub(crate) fn check_increasing(lambda: &[f64]) -> Result<()> {
    if lambda.first().is_some_and(|&l| !(l > 0.0)) {
        return Err(Error::InvalidInput("scales must be positive".into()));
    }
    if lambda.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput(format!("scales must be strictly increasing, got {lambda:?}")));
    }
    Ok(())
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Dense table of `theta_i(x)`, stored atom-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldValues {
    n_agents: usize,
    n_atoms: usize,
    data: Vec<f64>,
}

impl FieldValues {
    /// From one row per agent.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_agents = rows.len();
        let n_atoms = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_atoms) {
            return Err(Error::Dimension("ragged utility rows".into()));
        }
        let mut data = vec![0.0; n_agents * n_atoms];
        for (i, r) in rows.iter().enumerate() {
            for (x, &v) in r.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::InvalidInput(format!("utility of agent {i} at atom {x} is not finite")));
                }
                data[x * n_agents + i] = v;
            }
        }
        Ok(FieldValues { n_agents, n_atoms, data })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    #[inline]
    pub fn get(&self, i: usize, x: usize) -> f64 {
        self.data[x * self.n_agents + i]
    }

    /// Utilities of all agents at atom `x`.
    #[inline]
    pub fn at(&self, x: usize) -> &[f64] {
        &self.data[x * self.n_agents..(x + 1) * self.n_agents]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.n_atoms).map(|x| self.get(i, x)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents).map(|i| self.row(i)).collect()
    }

    /// Atom-major storage, `data[x * n_agents + i]`.
    pub(crate) fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// Keeps only the listed agents, in order.
    pub fn agents(&self, which: &[usize]) -> FieldValues {
        let rows: Vec<Vec<f64>> = which.iter().map(|&i| self.row(i)).collect();
        FieldValues::from_rows(&rows).expect("rows come from a valid table")
    }

    /// Keeps only the listed atoms, in order.
    pub fn atoms(&self, which: &[usize]) -> FieldValues {
        let mut data = Vec::with_capacity(which.len() * self.n_agents);
        for &x in which {
            data.extend_from_slice(self.at(x));
        }
        FieldValues { n_agents: self.n_agents, n_atoms: which.len(), data }
    }

    /// Multiplies agent `i` by `s`.
    pub fn scale_agent(&self, i: usize, s: f64) -> FieldValues {
        let mut out = self.clone();
        for x in 0..self.n_atoms {
            out.data[x * self.n_agents + i] *= s;
        }
        out
    }

    /// Pointwise max over the listed agents, as a single-agent table.
    pub fn max_over(&self, which: &[usize]) -> Vec<f64> {
        (0..self.n_atoms)
            .map(|x| which.iter().map(|&i| self.get(i, x)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}
