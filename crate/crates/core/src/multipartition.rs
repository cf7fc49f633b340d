//! Partitions with vector valued capacities.
//!
//! Each atom `x` carries a bundle `zeta(x)` of `J` goods with shares summing
//! to one. Agent `i` receiving the weak share `gamma(x, i)` collects
//! `M_i^(j) = sum_x w(x) zeta_j(x) gamma(x, i)` of good `j`. A price matrix
//! `P` (one row per agent) induces the option values
//! `theta_i(x) + P_i . zeta(x)`, and the support function of the set of
//! reachable capacity matrices is
//! `Xi0(P) = sum_x w(x) max_i P_i . zeta(x)` (with a zero option for
//! subpartitions).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{Cmp, LpBuilder, LpStatus};
use crate::measures::{DiscreteMeasure, FieldValues, PartitionLabeling, WeakPartition};
use crate::semidiscrete::{diagnose, Dynamics};
use crate::smooth::{self, Extras, OptionField};

/// Per-atom bundle of goods, each row in the unit simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodsField {
    j: usize,
    zeta: Vec<f64>,
}

impl GoodsField {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let j = rows.first().map_or(0, |r| r.len());
        if j == 0 {
            return Err(Error::InvalidInput("goods field needs at least one atom and one good".into()));
        }
        let mut zeta = Vec::with_capacity(rows.len() * j);
        for (x, r) in rows.iter().enumerate() {
            if r.len() != j {
                return Err(Error::Dimension(format!("atom {x} has {} goods, expected {j}", r.len())));
            }
            if r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidInput(format!("atom {x} has a negative share")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("shares at atom {x} sum to {s}")));
            }
            zeta.extend_from_slice(r);
        }
        Ok(GoodsField { j, zeta })
    }

    /// Two goods with shares `(s, 1 - s)`.
    pub fn from_shares(share: &[f64]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = share.iter().map(|&s| vec![s, 1.0 - s]).collect();
        Self::new(&rows)
    }

    /// A single good on `k` atoms.
    pub fn single(k: usize) -> Self {
        GoodsField { j: 1, zeta: vec![1.0; k] }
    }

    pub fn len(&self) -> usize {
        self.zeta.len() / self.j
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    pub fn n_goods(&self) -> usize {
        self.j
    }

    pub fn at(&self, x: usize) -> &[f64] {
        &self.zeta[x * self.j..(x + 1) * self.j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.zeta.chunks(self.j).map(|c| c.to_vec()).collect()
    }

    /// `mu(zeta_j)` for every good.
    pub fn totals(&self, mu: &DiscreteMeasure) -> Vec<f64> {
        let mut t = vec![0.0; self.j];
        for (x, &w) in mu.weights().iter().enumerate() {
            for (k, z) in self.at(x).iter().enumerate() {
                t[k] += w * z;
            }
        }
        t
    }

    /// Capacity matrix reached by a weak partition.
    pub fn capacities(&self, mu: &DiscreteMeasure, weak: &WeakPartition) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; self.j]; weak.n_agents];
        for (x, (row, &w)) in weak.gamma.iter().zip(mu.weights()).enumerate() {
            for (i, &g) in row.iter().enumerate() {
                for (k, z) in self.at(x).iter().enumerate() {
                    m[i][k] += w * g * z;
                }
            }
        }
        m
    }

    fn check(&self, mu: &DiscreteMeasure) -> Result<()> {
        if self.len() != mu.len() {
            return Err(Error::Dimension(format!("goods field has {} atoms, measure {}", self.len(), mu.len())));
        }
        Ok(())
    }
}

/// Partition (every atom fully allocated) or subpartition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Partition,
    Subpartition,
}

impl Mode {
    fn opt_out(self) -> bool {
        self == Mode::Subpartition
    }
}

fn check_matrix(name: &str, m: &[Vec<f64>], j: usize) -> Result<()> {
    if m.is_empty() {
        return Err(Error::InvalidInput(format!("{name} has no rows")));
    }
    for (i, r) in m.iter().enumerate() {
        if r.len() != j {
            return Err(Error::Dimension(format!("{name} row {i} has {} columns, expected {j}", r.len())));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{name} row {i} is not finite")));
        }
    }
    Ok(())
}

fn check_capacities(m: &[Vec<f64>], j: usize) -> Result<()> {
    check_matrix("capacity matrix", m, j)?;
    for (i, r) in m.iter().enumerate() {
        if let Some(v) = r.iter().find(|&&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("capacity matrix row {i} has negative entry {v}")));
        }
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn frobenius(p: &[Vec<f64>]) -> f64 {
    p.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn pairing(p: &[Vec<f64>], m: &[Vec<f64>]) -> f64 {
    p.iter().zip(m).map(|(a, b)| dot(a, b)).sum()
}

/// `Xi0(P)` and a subgradient; the subgradient row `i` is the bundle mass
/// of the cell where row `i` wins (ties to the lowest index, the zero
/// option wins ties in subpartition mode).
pub fn xi0(p: &[Vec<f64>], mu: &DiscreteMeasure, zeta: &GoodsField, mode: Mode) -> Result<(f64, Vec<Vec<f64>>)> {
    zeta.check(mu)?;
    check_matrix("price matrix", p, zeta.n_goods())?;
    Ok(xi0_unchecked(p, mu, zeta, mode))
}

fn xi0_unchecked(p: &[Vec<f64>], mu: &DiscreteMeasure, zeta: &GoodsField, mode: Mode) -> (f64, Vec<Vec<f64>>) {
    let j = zeta.n_goods();
    let mut v = 0.0;
    let mut g = vec![vec![0.0; j]; p.len()];
    for (x, &w) in mu.weights().iter().enumerate() {
        let z = zeta.at(x);
        let mut best = if mode.opt_out() { 0.0 } else { f64::NEG_INFINITY };
        let mut lab = usize::MAX;
        for (i, row) in p.iter().enumerate() {
            let a = dot(row, z);
            if a > best {
                best = a;
                lab = i;
            }
        }
        v += w * best;
        if lab != usize::MAX {
            for k in 0..j {
                g[lab][k] += w * z[k];
            }
        }
    }
    (v, g)
}

/// Classification of a capacity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Feasible,
    Infeasible,
    /// The linear program rejects the matrix but no certificate below the
    /// tolerance exists: the matrix sits on the boundary.
    Boundary,
}

/// Price matrix of unit Frobenius norm with `Xi0(P) - P:M = value < 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub prices: Vec<Vec<f64>>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub verdict: Verdict,
    /// Column sums of `M` minus `mu(zeta_j)`.
    pub balance: Vec<f64>,
    pub balanced: bool,
    /// Weak (sub)partition reaching `M` when feasible.
    pub weak: Option<WeakPartition>,
    pub certificate: Option<Certificate>,
}

/// Multistart parameters of the certificate search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub starts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { starts: 16, iterations: 300, seed: 0 }
    }
}

/// Feasibility of `M` with default search options.
pub fn feasibility_test(m: &[Vec<f64>], mu: &DiscreteMeasure, zeta: &GoodsField, mode: Mode) -> Result<Feasibility> {
    feasibility_test_with(m, mu, zeta, mode, &SearchOptions::default())
}

/// Decides whether `M` is reached by a weak (sub)partition. The linear
/// program over `gamma` decides; when it fails, a certificate is searched
/// for among price matrices on the unit sphere.
pub fn feasibility_test_with(
    m: &[Vec<f64>],
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    mode: Mode,
    opts: &SearchOptions,
) -> Result<Feasibility> {
    zeta.check(mu)?;
    let j = zeta.n_goods();
    check_capacities(m, j)?;
    let totals = zeta.totals(mu);
    let balance: Vec<f64> = (0..j).map(|k| m.iter().map(|r| r[k]).sum::<f64>() - totals[k]).collect();
    let btol = 1e-9 * (1.0 + mu.total_mass());
    let balanced = match mode {
        Mode::Partition => balance.iter().all(|b| b.abs() <= btol),
        Mode::Subpartition => balance.iter().all(|&b| b <= btol),
    };
    let weak = if balanced { reach_lp(m, mu, zeta, mode) } else { None };
    if weak.is_some() {
        return Ok(Feasibility { verdict: Verdict::Feasible, balance, balanced, weak, certificate: None });
    }
    let certificate = search_certificate(m, mu, zeta, mode, opts);
    let verdict = match &certificate {
        Some(c) if c.value < -1e-9 => Verdict::Infeasible,
        _ => Verdict::Boundary,
    };
    Ok(Feasibility { verdict, balance, balanced, weak: None, certificate })
}

fn reach_lp(m: &[Vec<f64>], mu: &DiscreteMeasure, zeta: &GoodsField, mode: Mode) -> Option<WeakPartition> {
    let n = m.len();
    let j = zeta.n_goods();
    let k = mu.len();
    let w = mu.weights();
    let mut lp = LpBuilder::new();
    let vars: Vec<usize> = (0..k * n).map(|_| lp.var(0.0)).collect();
    let cmp = if mode.opt_out() { Cmp::Le } else { Cmp::Eq };
    for x in 0..k {
        let terms: Vec<(usize, f64)> = (0..n).map(|i| (vars[x * n + i], 1.0)).collect();
        lp.row(&terms, cmp, 1.0);
    }
    for i in 0..n {
        for g in 0..j {
            let terms: Vec<(usize, f64)> = (0..k).map(|x| (vars[x * n + i], w[x] * zeta.at(x)[g])).collect();
            lp.row(&terms, Cmp::Eq, m[i][g]);
        }
    }
    let sol = lp.solve();
    if sol.status != LpStatus::Optimal {
        return None;
    }
    let gamma: Vec<Vec<f64>> = (0..k)
        .map(|x| {
            let row: Vec<f64> = (0..n).map(|i| sol.x[x * n + i].clamp(0.0, 1.0)).collect();
            let s: f64 = row.iter().sum();
            if s > 1.0 {
                row.iter().map(|v| v / s).collect()
            } else {
                row
            }
        })
        .collect();
    Some(WeakPartition { n_agents: n, gamma })
}

/// `Xi0(P) - P:M` on the unit sphere, minimized from the box program's
/// solution and from random starts by projected subgradient descent.
fn search_certificate(
    m: &[Vec<f64>],
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    mode: Mode,
    opts: &SearchOptions,
) -> Option<Certificate> {
    let n = m.len();
    let j = zeta.n_goods();
    let objective = |p: &[Vec<f64>]| {
        let (v, g) = xi0_unchecked(p, mu, zeta, mode);
        let grad: Vec<Vec<f64>> = g.iter().zip(m).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect();
        (v - pairing(p, m), grad)
    };
    let descend = |mut p: Vec<Vec<f64>>| -> Option<Certificate> {
        let norm = frobenius(&p);
        if !(norm > 0.0) {
            return None;
        }
        p.iter_mut().flatten().for_each(|v| *v /= norm);
        let (mut f, _) = objective(&p);
        let mut best = Certificate { prices: p.clone(), value: f };
        let step0 = 0.5 / (1.0 + mu.total_mass());
        for t in 0..opts.iterations {
            let (_, g) = objective(&p);
            // tangent part of the subgradient; f is homogeneous so g . P = f
            let mut d: Vec<Vec<f64>> = g.iter().zip(&p).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - f * y).collect()).collect();
            let dn = frobenius(&d);
            if dn < 1e-15 {
                break;
            }
            d.iter_mut().flatten().for_each(|v| *v /= dn);
            let eta = step0 / (1.0 + t as f64).sqrt();
            for (r, dr) in p.iter_mut().zip(&d) {
                for (v, dv) in r.iter_mut().zip(dr) {
                    *v -= eta * dv;
                }
            }
            let nn = frobenius(&p);
            p.iter_mut().flatten().for_each(|v| *v /= nn);
            f = objective(&p).0;
            if f < best.value {
                best = Certificate { prices: p.clone(), value: f };
            }
        }
        Some(best)
    };
    let mut starts: Vec<Vec<Vec<f64>>> = Vec::new();
    if let Some(p) = box_certificate(m, mu, zeta, mode) {
        starts.push(p);
    }
    for s in 0..opts.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(s as u64));
        starts.push((0..n).map(|_| (0..j).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect());
    }
    starts
        .into_par_iter()
        .filter_map(descend)
        .collect::<Vec<_>>()
        .into_iter()
        .min_by(|a, b| a.value.total_cmp(&b.value))
}

/// Minimizes `Xi0(P) - P:M` over `|P_ij| <= 1` as a linear program, with
/// `P = q - 1`, `q in [0, 2]` and epigraph variables `s_x = t_x + 1 >= 0`.
fn box_certificate(m: &[Vec<f64>], mu: &DiscreteMeasure, zeta: &GoodsField, mode: Mode) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let j = zeta.n_goods();
    let k = mu.len();
    let w = mu.weights();
    let mut lp = LpBuilder::new();
    let s: Vec<usize> = (0..k).map(|x| lp.var(w[x])).collect();
    let q: Vec<usize> = (0..n * j).map(|c| lp.var(-m[c / j][c % j])).collect();
    for x in 0..k {
        let z = zeta.at(x);
        for i in 0..n {
            let mut terms = vec![(s[x], 1.0)];
            terms.extend((0..j).map(|g| (q[i * j + g], -z[g])));
            lp.row(&terms, Cmp::Ge, 0.0);
        }
        if mode.opt_out() {
            lp.row(&[(s[x], 1.0)], Cmp::Ge, 1.0);
        }
    }
    for &c in &q {
        lp.row(&[(c, 1.0)], Cmp::Le, 2.0);
    }
    let sol = lp.solve();
    if sol.status != LpStatus::Optimal {
        return None;
    }
    Some((0..n).map(|i| (0..j).map(|g| sol.x[q[i * j + g]] - 1.0).collect()).collect())
}

/// Violated Jensen inequality for `F(x) = |x|^2`: `lhs < rhs` where
/// `lhs = sum_i m_i F(M_i / m_i)` for the dominating candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenWitness {
    pub lhs: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dominance {
    pub dominates: bool,
    /// `s[k][i]`: share of row `k` of `M` moved to row `i` of `M'`.
    pub stochastic: Option<Vec<Vec<f64>>>,
    pub witness: Option<JensenWitness>,
}

/// `sum_i m_i F(M_i / m_i)` over rows of positive mass, `m_i = sum_j M_ij`.
fn perspective_sum(m: &[Vec<f64>], f: impl Fn(&[f64]) -> f64) -> f64 {
    m.iter()
        .filter_map(|r| {
            let s: f64 = r.iter().sum();
            (s > 0.0).then(|| {
                let y: Vec<f64> = r.iter().map(|v| v / s).collect();
                s * f(&y)
            })
        })
        .sum()
}

/// Whether `M` dominates `M'`, i.e. `M'_i = sum_k s[k][i] M_k` for a
/// row-stochastic `s`.
pub fn dominance_test(m: &[Vec<f64>], m2: &[Vec<f64>]) -> Result<Dominance> {
    let j = m.first().map_or(0, |r| r.len());
    check_capacities(m, j)?;
    check_capacities(m2, j)?;
    let (n, n2) = (m.len(), m2.len());
    let mut lp = LpBuilder::new();
    let vars: Vec<usize> = (0..n * n2).map(|_| lp.var(0.0)).collect();
    for k in 0..n {
        let terms: Vec<(usize, f64)> = (0..n2).map(|i| (vars[k * n2 + i], 1.0)).collect();
        lp.row(&terms, Cmp::Eq, 1.0);
    }
    for i in 0..n2 {
        for g in 0..j {
            let terms: Vec<(usize, f64)> = (0..n).map(|k| (vars[k * n2 + i], m[k][g])).collect();
            lp.row(&terms, Cmp::Eq, m2[i][g]);
        }
    }
    let sol = lp.solve();
    let sq = |y: &[f64]| dot(y, y);
    let lhs = perspective_sum(m, sq);
    let rhs = perspective_sum(m2, sq);
    if sol.status == LpStatus::Optimal {
        let s = (0..n).map(|k| (0..n2).map(|i| sol.x[k * n2 + i].max(0.0)).collect()).collect();
        return Ok(Dominance { dominates: true, stochastic: Some(s), witness: None });
    }
    let witness = (lhs < rhs - 1e-12 * (1.0 + rhs.abs())).then_some(JensenWitness { lhs, rhs });
    Ok(Dominance { dominates: false, stochastic: None, witness })
}

/// Convex function `F(y) = max_l (a_l . y + b_l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineMax {
    pub pieces: Vec<(Vec<f64>, f64)>,
}

impl AffineMax {
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.pieces.iter().map(|(a, b)| dot(a, y) + b).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `pieces` random affine functions with coefficients in `[-1, 1]`.
    pub fn random<R: Rng>(j: usize, pieces: usize, rng: &mut R) -> Self {
        let pieces = (0..pieces.max(1))
            .map(|_| ((0..j).map(|_| rng.gen_range(-1.0..1.0)).collect(), rng.gen_range(-1.0..1.0)))
            .collect();
        AffineMax { pieces }
    }

    /// `F(y) = max_i P_i . y`, the function a price certificate induces.
    pub fn from_prices(p: &[Vec<f64>]) -> Self {
        AffineMax { pieces: p.iter().map(|r| (r.clone(), 0.0)).collect() }
    }
}

/// `min_F [mu(F(zeta)) - sum_i m_i F(M_i / m_i)]` over the family.
pub fn convex_criterion_check(
    m: &[Vec<f64>],
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    family: &[AffineMax],
) -> Result<f64> {
    zeta.check(mu)?;
    check_capacities(m, zeta.n_goods())?;
    let w = mu.weights();
    Ok(family
        .iter()
        .map(|f| {
            let lhs: f64 = (0..mu.len()).map(|x| w[x] * f.eval(zeta.at(x))).sum();
            lhs - perspective_sum(m, |y| f.eval(y))
        })
        .fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiResult {
    pub prices: Vec<Vec<f64>>,
    pub labeling: PartitionLabeling,
    pub weak: WeakPartition,
    /// `sum_x w(x) sum_i gamma(x, i) theta_i(x)`.
    pub value: f64,
    /// `Xi(P) - P:M` at the returned prices.
    pub dual_value: f64,
    pub gap: f64,
    /// Unit direction of diverging smoothed prices, when the smoothed
    /// minimizers grow without a matching change of value.
    pub escalation: Option<Vec<f64>>,
    pub polished_atoms: usize,
}

fn field_of(mu: &DiscreteMeasure, zeta: &GoodsField, theta: &FieldValues, mode: Mode) -> OptionField {
    let n = theta.n_agents();
    let mut th = Vec::with_capacity(mu.len() * n);
    for x in 0..mu.len() {
        th.extend_from_slice(theta.at(x));
    }
    OptionField { w: mu.weights().to_vec(), theta: th, zeta: zeta.zeta.clone(), n, j: zeta.n_goods(), opt_out: mode.opt_out() }
}

fn unflatten(p: &[f64], j: usize) -> Vec<Vec<f64>> {
    p.chunks(j).map(|c| c.to_vec()).collect()
}

/// Maximizes `sum_i mu_i(theta_i)` over weak (sub)partitions reaching `M`.
///
/// The dual `Xi(P) - P:M` is smoothed and minimized along a decreasing
/// temperature schedule; near-tied atoms are then reallocated by an exact
/// linear program whose duals give the final prices.
pub fn solve_multipartition(
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    m: &[Vec<f64>],
    theta: &FieldValues,
    mode: Mode,
) -> Result<MultiResult> {
    zeta.check(mu)?;
    let j = zeta.n_goods();
    check_capacities(m, j)?;
    let n = m.len();
    if theta.n_agents() != n || theta.n_atoms() != mu.len() {
        return Err(Error::Dimension(format!(
            "field is {}x{}, expected {n} agents on {} atoms",
            theta.n_agents(),
            theta.n_atoms(),
            mu.len()
        )));
    }
    let totals = zeta.totals(mu);
    let btol = 1e-9 * (1.0 + mu.total_mass());
    for k in 0..j {
        let s: f64 = m.iter().map(|r| r[k]).sum();
        let bad = match mode {
            Mode::Partition => (s - totals[k]).abs() > btol,
            Mode::Subpartition => s > totals[k] + btol,
        };
        if bad {
            return Err(Error::Infeasible(format!("good {k}: capacities {s} against supply {}", totals[k])));
        }
    }
    let field = field_of(mu, zeta, theta, mode);
    let flat_m: Vec<f64> = m.iter().flatten().copied().collect();
    let extras = Extras { linear: flat_m.clone(), gauge: mode == Mode::Partition, ..Default::default() };
    let scale = field.scale().max(1e-300);
    let gtol = 1e-12 * mu.total_mass();
    let mut p = vec![0.0; n * j];
    let mut norms = Vec::new();
    let mut values = Vec::new();
    for k in 1..=7 {
        let rep = smooth::homotopy(&field, &extras, &p, &[scale * 10f64.powi(-k)], gtol, 100)?;
        p = rep.p;
        norms.push(p.iter().map(|v| v * v).sum::<f64>().sqrt());
        values.push(field.hard_value(&p) - dot(&flat_m, &p));
    }
    let escalation = escalating(&norms, &values, scale).then(|| {
        let nn = norms.last().copied().unwrap_or(1.0);
        p.iter().map(|v| v / nn).collect()
    });

    let (prices, gamma, polished) = polish_multi(mu, zeta, m, theta, mode, &p)?;
    let prices = if mode == Mode::Partition { center(prices) } else { prices };
    let weak = WeakPartition { n_agents: n, gamma };
    let labeling = label_weak(&weak, mode);
    let value: f64 = weak.values(mu, theta).iter().sum();
    let flat: Vec<f64> = prices.iter().flatten().copied().collect();
    let dual_value = field.hard_value(&flat) - dot(&flat_m, &flat);
    Ok(MultiResult { prices: unflatten(&flat, j), labeling, weak, value, dual_value, gap: dual_value - value, escalation, polished_atoms: polished })
}

/// Norms growing tenfold over the last stages while the value settles.
fn escalating(norms: &[f64], values: &[f64], scale: f64) -> bool {
    let k = norms.len();
    if k < 3 {
        return false;
    }
    let grow = norms[k - 1] > 10.0 * norms[k - 3].max(1e-300) && norms[k - 1] > 1e3 * (1.0 + scale);
    let flat = (values[k - 1] - values[k - 3]).abs() <= 1e-6 * (1.0 + values[k - 1].abs());
    grow && flat
}

/// Removes the column means, which leave the partition dual unchanged.
fn center(mut p: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = p.len() as f64;
    let j = p.first().map_or(0, |r| r.len());
    for k in 0..j {
        let mean = p.iter().map(|r| r[k]).sum::<f64>() / n;
        p.iter_mut().for_each(|r| r[k] -= mean);
    }
    p
}

/// Largest share wins; label 0 when the unassigned share is largest.
fn label_weak(weak: &WeakPartition, mode: Mode) -> PartitionLabeling {
    let labels = weak
        .gamma
        .iter()
        .map(|row| {
            let mut best = if mode.opt_out() { 1.0 - row.iter().sum::<f64>() } else { f64::NEG_INFINITY };
            let mut lab = 0;
            for (i, &g) in row.iter().enumerate() {
                if g > best {
                    best = g;
                    lab = i + 1;
                }
            }
            lab
        })
        .collect();
    PartitionLabeling { n_agents: weak.n_agents, labels }
}

type Polished = (Vec<Vec<f64>>, Vec<Vec<f64>>, usize);

fn polish_multi(
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    m: &[Vec<f64>],
    theta: &FieldValues,
    mode: Mode,
    p_smooth: &[f64],
) -> Result<Polished> {
    let n = m.len();
    let j = zeta.n_goods();
    let k = mu.len();
    let field = field_of(mu, zeta, theta, mode);
    let mut opts = vec![0.0; n];
    let mut gaps = Vec::with_capacity(k);
    let mut tops = Vec::with_capacity(k);
    for x in 0..k {
        field.options(p_smooth, x, &mut opts);
        let (lab, best, second) = top_two(&opts, mode.opt_out());
        tops.push(lab);
        gaps.push(best - second);
    }
    let scale = field.scale();
    let slack = 1e-11 * (1.0 + scale + p_smooth.iter().fold(0.0f64, |s, v| s.max(v.abs())));
    let mut tau = 3e-5 * scale;
    loop {
        let full = gaps.iter().all(|&g| g <= tau);
        let amb: Vec<usize> = (0..k).filter(|&x| gaps[x] <= tau).collect();
        let fixed: Vec<usize> = (0..k).map(|x| if gaps[x] <= tau { usize::MAX } else { tops[x] }).collect();
        match restricted_lp(mu, zeta, m, theta, mode, &fixed, &amb, slack) {
            Some((p, gamma)) => return Ok((unflatten(&p, j), gamma, amb.len())),
            None if full => {
                return Err(Error::Infeasible("no weak partition reaches the capacity matrix".into()));
            }
            None => tau = if tau > 0.0 { tau * 10.0 } else { 1e-300 },
        }
    }
}

/// Best label (0 = opt out), best value and runner-up value.
fn top_two(opts: &[f64], opt_out: bool) -> (usize, f64, f64) {
    let (mut lab, mut best, mut second) = if opt_out { (0, 0.0, f64::NEG_INFINITY) } else { (usize::MAX, f64::NEG_INFINITY, f64::NEG_INFINITY) };
    for (i, &a) in opts.iter().enumerate() {
        if a > best {
            second = best;
            best = a;
            lab = i + 1;
        } else if a > second {
            second = a;
        }
    }
    (lab, best, second)
}

#[allow(clippy::too_many_arguments)]
fn restricted_lp(
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    m: &[Vec<f64>],
    theta: &FieldValues,
    mode: Mode,
    fixed: &[usize],
    amb: &[usize],
    slack: f64,
) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = m.len();
    let j = zeta.n_goods();
    let w = mu.weights();
    let mut rhs: Vec<Vec<f64>> = m.to_vec();
    for (x, &l) in fixed.iter().enumerate() {
        if l != usize::MAX && l > 0 {
            for g in 0..j {
                rhs[l - 1][g] -= w[x] * zeta.at(x)[g];
            }
        }
    }
    let mtol = 1e-12 * (1.0 + mu.total_mass());
    if rhs.iter().flatten().any(|&v| v < -mtol) {
        return None;
    }
    let mut lp = LpBuilder::new();
    let vars: Vec<usize> = amb.iter().flat_map(|&x| (0..n).map(move |i| (x, i))).map(|(x, i)| lp.var(-w[x] * theta.get(i, x))).collect();
    let cmp = if mode.opt_out() { Cmp::Le } else { Cmp::Eq };
    for q in 0..amb.len() {
        let terms: Vec<(usize, f64)> = (0..n).map(|i| (vars[q * n + i], 1.0)).collect();
        lp.row(&terms, cmp, 1.0);
    }
    let mut mrows = vec![0; n * j];
    for i in 0..n {
        for g in 0..j {
            let terms: Vec<(usize, f64)> =
                amb.iter().enumerate().map(|(q, &x)| (vars[q * n + i], w[x] * zeta.at(x)[g])).collect();
            let v = rhs[i][g];
            mrows[i * j + g] = lp.row(&terms, Cmp::Eq, if v.abs() <= mtol { 0.0 } else { v });
        }
    }
    let sol = lp.solve();
    if sol.status != LpStatus::Optimal {
        return None;
    }
    let p: Vec<f64> = mrows.iter().map(|&r| sol.duals[r]).collect();
    let field = field_of(mu, zeta, theta, mode);
    let mut opts = vec![0.0; n];
    for (x, &l) in fixed.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        field.options(&p, x, &mut opts);
        let (_, best, _) = top_two(&opts, mode.opt_out());
        let own = if l == 0 { 0.0 } else { opts[l - 1] };
        if own < best - slack {
            return None;
        }
    }
    let mut gamma = vec![vec![0.0; n]; mu.len()];
    for (x, &l) in fixed.iter().enumerate() {
        if l != usize::MAX && l > 0 {
            gamma[x][l - 1] = 1.0;
        }
    }
    for (q, &x) in amb.iter().enumerate() {
        let row: Vec<f64> = (0..n).map(|i| sol.x[q * n + i].clamp(0.0, 1.0)).collect();
        let s: f64 = row.iter().sum();
        gamma[x] = if s > 1.0 { row.iter().map(|v| v / s).collect() } else { row };
    }
    Some((p, gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrongExtraction {
    pub labeling: PartitionLabeling,
    pub warning: Option<String>,
}

/// Labels each atom by `argmax_i P_i . zeta(x)`, ties to the lowest index.
/// Identical rows share their cells, which is reported as a warning.
pub fn extract_strong_multipartition(
    p: &[Vec<f64>],
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
) -> Result<StrongExtraction> {
    zeta.check(mu)?;
    check_matrix("price matrix", p, zeta.n_goods())?;
    let n = p.len();
    let mut dup = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if p[a] == p[b] {
                dup.push((a + 1, b + 1));
            }
        }
    }
    let labels = (0..mu.len())
        .map(|x| {
            let z = zeta.at(x);
            let mut lab = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, row) in p.iter().enumerate() {
                let a = dot(row, z);
                if a > best {
                    best = a;
                    lab = i + 1;
                }
            }
            lab
        })
        .collect();
    let warning = (!dup.is_empty()).then(|| format!("identical price rows {dup:?} form a coalition"));
    Ok(StrongExtraction { labeling: PartitionLabeling { n_agents: n, labels }, warning })
}

/// Point of the two nations boundary trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub r: f64,
    pub m_j: f64,
    pub m_p: f64,
}

/// Bundles `(m_J, m_P)` of the sets `{zeta_J >= r zeta_P}` for every
/// threshold `r` on the ratio `zeta_J / zeta_P`.
pub fn two_nations_region(share: &[f64], mu: &DiscreteMeasure, thresholds: &[f64]) -> Result<Vec<RegionPoint>> {
    if share.len() != mu.len() {
        return Err(Error::Dimension(format!("{} shares for {} atoms", share.len(), mu.len())));
    }
    if let Some(k) = share.iter().position(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::InvalidInput(format!("share {} at atom {k} outside [0, 1]", share[k])));
    }
    let w = mu.weights();
    Ok(thresholds
        .iter()
        .map(|&r| {
            let (mut mj, mut mp) = (0.0, 0.0);
            for (x, &s) in share.iter().enumerate() {
                if s >= r * (1.0 - s) {
                    mj += w[x] * s;
                    mp += w[x] * (1.0 - s);
                }
            }
            RegionPoint { r, m_j: mj, m_p: mp }
        })
        .collect())
}

/// `r,mJ,mP` lines with a header.
pub fn region_csv(points: &[RegionPoint]) -> String {
    let mut out = String::from("r,mJ,mP\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.r, p.m_j, p.m_p));
    }
    out
}

/// Whether `alpha (mu(zeta_J), mu(zeta_P))` lies in the convex hull of the
/// trace together with the origin and the full bundle.
pub fn diagonal_in_hull(points: &[RegionPoint], total: (f64, f64), alpha: f64) -> bool {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.m_j, p.m_p)).collect();
    pts.push((0.0, 0.0));
    pts.push(total);
    let hull = convex_hull(pts);
    let q = (alpha * total.0, alpha * total.1);
    let tol = 1e-12 * (1.0 + total.0 + total.1);
    match hull.len() {
        0 => false,
        1 => (hull[0].0 - q.0).abs() <= tol && (hull[0].1 - q.1).abs() <= tol,
        2 => {
            let (a, b) = (hull[0], hull[1]);
            let cr = (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
            let within = (q.0 - a.0) * (q.0 - b.0) <= tol && (q.1 - a.1) * (q.1 - b.1) <= tol;
            cr.abs() <= tol && within
        }
        h => (0..h).all(|i| {
            let (a, b) = (hull[i], hull[(i + 1) % h]);
            (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0) >= -tol
        }),
    }
}

/// Counter-clockwise hull by the monotone chain.
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut lower: Vec<(f64, f64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(f64, f64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Implicit Euler run of `dP/dt = M - mu(zeta 1_{A(P)})` (the negative
/// gradient of `Xi(P) - P:M`); trajectories are flattened row by row.
#[allow(clippy::too_many_arguments)]
pub fn multi_price_dynamics(
    p0: &[Vec<f64>],
    mu: &DiscreteMeasure,
    zeta: &GoodsField,
    theta: &FieldValues,
    m: &[Vec<f64>],
    dt: f64,
    steps: usize,
    threshold: f64,
) -> Result<Dynamics> {
    zeta.check(mu)?;
    let j = zeta.n_goods();
    check_matrix("price matrix", p0, j)?;
    check_capacities(m, j)?;
    if theta.n_agents() != m.len() || p0.len() != m.len() || theta.n_atoms() != mu.len() {
        return Err(Error::Dimension("prices, capacities and field disagree on the agents".into()));
    }
    let field = field_of(mu, zeta, theta, Mode::Partition);
    let linear: Vec<f64> = m.iter().flatten().copied().collect();
    let start: Vec<f64> = p0.iter().flatten().copied().collect();
    let flow = smooth::prox_flow(&field, &linear, &start, dt, steps)?;
    let diagnosis = diagnose(&flow.trajectory, dt, threshold);
    Ok(Dynamics { trajectory: flow.trajectory, lyapunov: flow.lyapunov, max_increase: flow.max_increase, diagnosis })
}
