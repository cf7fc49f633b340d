//! Transport through finitely many hub sites.
//!
//! A cost `c(x, y) = min_z c1(x, z) + c2(y, z)` is approximated by
//! restricting `z` to sites `z_1, ..., z_m`. The transport problem for the
//! restricted cost splits into congruent partitions `mu = sum mu_i`,
//! `nu = sum nu_i` with `mu_i(X) = nu_i(Y)`, priced by the concave dual
//! `Xi(p) = sum_x w(x) min_i [c1(x, z_i) + p_i] + sum_y w(y) min_i [c2(y, z_i) - p_i]`.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discrete_ot::{solve_assignment, solve_kantorovich, Balance, PlanEntry, Sense, TransportPlan};
use crate::error::{Error, Result};
use crate::lp::{Cmp, LpBuilder, LpStatus};
use crate::measures::{sq_dist, DiscreteMeasure, PartitionLabeling, WeakPartition};
use crate::smooth::{self, Extras, OptionField};

/// Hub locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SiteSet {
    pub sites: Vec<Vec<f64>>,
}

impl SiteSet {
    pub fn new(sites: Vec<Vec<f64>>) -> Result<Self> {
        let d = sites.first().map(|s| s.len()).ok_or_else(|| Error::InvalidInput("at least one site is needed".into()))?;
        for (i, s) in sites.iter().enumerate() {
            if s.len() != d {
                return Err(Error::Dimension(format!("site {i} has dimension {}, expected {d}", s.len())));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("site {i} is not finite")));
            }
        }
        Ok(SiteSet { sites })
    }

    /// `m` midpoints of a uniform grid on `[a, b]`.
    pub fn grid_1d(a: f64, b: f64, m: usize) -> Result<Self> {
        if m == 0 || !(b > a) {
            return Err(Error::InvalidInput(format!("grid of {m} sites on [{a}, {b}]")));
        }
        Self::new((0..m).map(|k| vec![a + (b - a) * (k as f64 + 0.5) / m as f64]).collect())
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.sites[0].len()
    }
}

/// Kernels `c1(x, z)` and `c2(y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum CostPair {
    /// `2^(r-1) |x - z|^r` on both sides, which interpolates `|x - y|^r`.
    Split { r: f64 },
    /// `a |x - z|^r` and `b |y - z|^r`.
    Power { r: f64, a: f64, b: f64 },
    /// Tabulated `c1[x][i]` and `c2[y][i]` for the stored atoms and sites.
    Matrix { c1: Vec<Vec<f64>>, c2: Vec<Vec<f64>> },
}

impl FromStr for CostPair {
    type Err = Error;

    /// `quadratic`, `quadratic:r=R`, `split:r=R` or `power:r=R,a=A,b=B`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s.split_once(':').unwrap_or((s, ""));
        let mut r = 2.0;
        let mut a = 1.0;
        let mut b = 1.0;
        for kv in args.split(',').filter(|t| !t.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::InvalidInput(format!("bad cost parameter {kv:?}")))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::InvalidInput(format!("bad number in {kv:?}")))?;
            match k.trim() {
                "r" => r = v,
                "a" => a = v,
                "b" => b = v,
                other => return Err(Error::InvalidInput(format!("unknown cost parameter {other:?}"))),
            }
        }
        let c = match name.trim() {
            "quadratic" | "split" => CostPair::Split { r },
            "power" => CostPair::Power { r, a, b },
            other => return Err(Error::InvalidInput(format!("unknown cost family {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }
}

impl CostPair {
    fn validate(&self) -> Result<()> {
        match *self {
            CostPair::Split { r } | CostPair::Power { r, .. } if !(r >= 1.0) || !r.is_finite() => {
                Err(Error::InvalidInput(format!("exponent {r} must be at least 1")))
            }
            CostPair::Power { a, b, .. } if !(a >= 0.0 && b >= 0.0) => {
                Err(Error::InvalidInput(format!("coefficients {a}, {b} must be nonnegative")))
            }
            _ => Ok(()),
        }
    }

    /// Coefficients and exponent of the geometric families.
    fn geometric(&self) -> Option<(f64, f64, f64)> {
        match *self {
            CostPair::Split { r } => {
                let c = 2f64.powf(r - 1.0);
                Some((c, c, r))
            }
            CostPair::Power { r, a, b } => Some((a, b, r)),
            CostPair::Matrix { .. } => None,
        }
    }

    /// `(c1(x, z_i), c2(y, z_i))` tabulated over the atoms.
    pub fn tables(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure, sites: &SiteSet) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.validate()?;
        let m = sites.len();
        match self {
            CostPair::Matrix { c1, c2 } => {
                for (name, t, k) in [("c1", c1, mu.len()), ("c2", c2, nu.len())] {
                    if t.len() != k || t.iter().any(|r| r.len() != m) {
                        return Err(Error::Dimension(format!("{name} must be {k}x{m}")));
                    }
                    if t.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(Error::InvalidInput(format!("{name} is not finite")));
                    }
                }
                Ok((c1.clone(), c2.clone()))
            }
            _ => {
                let (a, b, r) = self.geometric().expect("geometric family");
                for (name, meas) in [("mu", mu), ("nu", nu)] {
                    if meas.dim() != sites.dim() || !meas.has_coordinates() {
                        return Err(Error::Dimension(format!(
                            "{name} has dimension {}, sites {}",
                            meas.dim(),
                            sites.dim()
                        )));
                    }
                }
                let tab = |meas: &DiscreteMeasure, c: f64| -> Vec<Vec<f64>> {
                    (0..meas.len())
                        .into_par_iter()
                        .map(|x| sites.sites.iter().map(|z| c * power(meas.point(x), z, r)).collect())
                        .collect()
                };
                Ok((tab(mu, a), tab(nu, b)))
            }
        }
    }
}

fn power(a: &[f64], b: &[f64], r: f64) -> f64 {
    let d2 = sq_dist(a, b);
    if r == 2.0 {
        d2
    } else {
        d2.sqrt().powf(r)
    }
}

/// `min_i c1(x, z_i) + c2(y, z_i)` and the minimizing site (lowest index on
/// ties), for the geometric families.
pub fn czm_cost(x: &[f64], y: &[f64], sites: &SiteSet, costs: &CostPair) -> Result<(f64, usize)> {
    costs.validate()?;
    let (a, b, r) = costs
        .geometric()
        .ok_or_else(|| Error::InvalidInput("tabulated costs need atom indices, use czm_matrix".into()))?;
    if x.len() != sites.dim() || y.len() != sites.dim() {
        return Err(Error::Dimension("points and sites differ in dimension".into()));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, z) in sites.sites.iter().enumerate() {
        let v = a * power(x, z, r) + b * power(y, z, r);
        if v < best.0 {
            best = (v, i);
        }
    }
    Ok(best)
}

/// The restricted cost between every pair of atoms.
pub fn czm_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, sites: &SiteSet, costs: &CostPair) -> Result<Vec<Vec<f64>>> {
    let (c1, c2) = costs.tables(mu, nu, sites)?;
    Ok(c1
        .par_iter()
        .map(|r1| c2.iter().map(|r2| r1.iter().zip(r2).map(|(a, b)| a + b).fold(f64::INFINITY, f64::min)).collect())
        .collect())
}

/// `|x - y|^r` between every pair of atoms.
pub fn power_cost_matrix(mu: &DiscreteMeasure, nu: &DiscreteMeasure, r: f64) -> Result<Vec<Vec<f64>>> {
    if mu.dim() != nu.dim() || !mu.has_coordinates() || !nu.has_coordinates() {
        return Err(Error::Dimension("measures need coordinates of equal dimension".into()));
    }
    Ok((0..mu.len()).map(|x| (0..nu.len()).map(|y| power(mu.point(x), nu.point(y), r)).collect()).collect())
}

fn argmin_shifted(row: &[f64], p: &[f64], sign: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, (c, q)) in row.iter().zip(p).enumerate() {
        let v = c + sign * q;
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// `Xi(p)` and its supergradient `mu(A_i(p)) - nu(B_i(-p))`.
pub fn dual_value(
    p: &[f64],
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    sites: &SiteSet,
    costs: &CostPair,
) -> Result<(f64, Vec<f64>)> {
    if p.len() != sites.len() {
        return Err(Error::Dimension(format!("{} prices for {} sites", p.len(), sites.len())));
    }
    let (c1, c2) = costs.tables(mu, nu, sites)?;
    Ok(xi_tables(p, &c1, &c2, mu.weights(), nu.weights(), false))
}

fn xi_tables(p: &[f64], c1: &[Vec<f64>], c2: &[Vec<f64>], w1: &[f64], w2: &[f64], truncate: bool) -> (f64, Vec<f64>) {
    let m = p.len();
    let side = |c: &[Vec<f64>], w: &[f64], sign: f64| -> (f64, Vec<f64>) {
        c.par_iter()
            .zip(w.par_iter())
            .fold(
                || (0.0, vec![0.0; m]),
                |(mut v, mut g), (row, &wx)| {
                    let (i, val) = argmin_shifted(row, p, sign);
                    if truncate && val > 0.0 {
                        return (v, g);
                    }
                    v += wx * val;
                    g[i] += sign * wx;
                    (v, g)
                },
            )
            .reduce(
                || (0.0, vec![0.0; m]),
                |(a, mut ga), (b, gb)| {
                    ga.iter_mut().zip(&gb).for_each(|(x, y)| *x += y);
                    (a + b, ga)
                },
            )
    };
    let (v1, g1) = side(c1, w1, 1.0);
    let (v2, g2) = side(c2, w2, -1.0);
    (v1 + v2, g1.iter().zip(&g2).map(|(a, b)| a + b).collect())
}

/// Optimal congruent partition for the restricted cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Congruent {
    /// Maximizer of `Xi`, gauged to `sum p = 0`.
    pub prices: Vec<f64>,
    /// Site label per atom of `mu` (sites numbered from 1).
    pub labels_mu: PartitionLabeling,
    pub labels_nu: PartitionLabeling,
    /// Shares of every atom per site.
    pub weak_mu: WeakPartition,
    pub weak_nu: WeakPartition,
    /// `mu(A_i) = nu(B_i)`.
    pub cell_masses: Vec<f64>,
    /// Product coupling `sum_i mu_i x nu_i / r_i`.
    pub plan: TransportPlan,
    /// `c^{Z_m}(mu, nu)`.
    pub value: f64,
    /// `Xi` at the returned prices.
    pub dual_value: f64,
    /// Whether the labels come from the prices without splitting atoms.
    pub strong: bool,
}

struct FlowSolution {
    value: f64,
    prices: Vec<f64>,
    f1: Vec<Vec<f64>>,
    f2: Vec<Vec<f64>>,
}

/// Consumers (rows of `c1`) and producers (rows of `c2`) routed through
/// sites; `hedonic` lets atoms stay out instead of requiring full routing.
fn flow_lp(c1: &[Vec<f64>], c2: &[Vec<f64>], w1: &[f64], w2: &[f64], hedonic: bool) -> Result<FlowSolution> {
    let m = c1.first().or(c2.first()).map_or(0, |r| r.len());
    let mut lp = LpBuilder::new();
    let v1: Vec<Vec<usize>> = c1.iter().map(|r| r.iter().map(|&c| lp.var(c)).collect()).collect();
    let v2: Vec<Vec<usize>> = c2.iter().map(|r| r.iter().map(|&c| lp.var(c)).collect()).collect();
    let cmp = if hedonic { Cmp::Le } else { Cmp::Eq };
    for (vars, w) in [(&v1, w1), (&v2, w2)] {
        for (row, &wx) in vars.iter().zip(w) {
            let t: Vec<(usize, f64)> = row.iter().map(|&v| (v, 1.0)).collect();
            lp.row(&t, cmp, wx);
        }
    }
    // the last balance row is implied when every atom is routed
    let n_bal = if hedonic { m } else { m.saturating_sub(1) };
    let mut bal = Vec::with_capacity(n_bal);
    for i in 0..n_bal {
        let mut t: Vec<(usize, f64)> = v1.iter().map(|r| (r[i], 1.0)).collect();
        t.extend(v2.iter().map(|r| (r[i], -1.0)));
        bal.push(lp.row(&t, Cmp::Eq, 0.0));
    }
    let sol = lp.solve();
    if sol.status != LpStatus::Optimal {
        return Err(Error::NoConvergence { iterations: 0, residual: sol.infeasibility });
    }
    let mut prices: Vec<f64> = bal.iter().map(|&r| -sol.duals[r]).collect();
    prices.resize(m, 0.0);
    let take = |vars: &[Vec<usize>]| -> Vec<Vec<f64>> { vars.iter().map(|r| r.iter().map(|&v| sol.x[v].max(0.0)).collect()).collect() };
    Ok(FlowSolution { value: sol.value, prices, f1: take(&v1), f2: take(&v2) })
}

fn smooth_prices(c1: &[Vec<f64>], c2: &[Vec<f64>], w1: &[f64], w2: &[f64], hedonic: bool) -> Result<Vec<f64>> {
    let m = c1.first().or(c2.first()).map_or(0, |r| r.len());
    let mut w = w1.to_vec();
    w.extend_from_slice(w2);
    let theta: Vec<f64> = c1.iter().chain(c2).flat_map(|r| r.iter().map(|c| -c)).collect();
    let zeta: Vec<f64> = std::iter::repeat(-1.0).take(c1.len()).chain(std::iter::repeat(1.0).take(c2.len())).collect();
    let field = OptionField { w, theta, zeta, n: m, j: 1, opt_out: hedonic };
    let extras = Extras { gauge: !hedonic, ..Default::default() };
    let s = field.scale().max(1e-300);
    let schedule: Vec<f64> = (1..=9).map(|k| s * 10f64.powi(-k)).collect();
    let mass: f64 = field.w.iter().sum();
    Ok(smooth::homotopy(&field, &extras, &vec![0.0; m], &schedule, 1e-13 * (1.0 + mass), 100)?.p)
}

/// Strong labels of the atoms at prices `p` (0 for the null option).
fn strong_labels(c: &[Vec<f64>], p: &[f64], sign: f64, hedonic: bool) -> Vec<usize> {
    c.iter()
        .map(|row| {
            let (i, v) = argmin_shifted(row, p, sign);
            if hedonic && v >= 0.0 {
                0
            } else {
                i + 1
            }
        })
        .collect()
}

fn label_masses(labels: &[usize], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m + 1];
    for (&l, &wx) in labels.iter().zip(w) {
        out[l] += wx;
    }
    out
}

fn labels_cost(labels: &[usize], c: &[Vec<f64>], w: &[f64]) -> f64 {
    labels.iter().zip(c).zip(w).filter(|((&l, _), _)| l > 0).map(|((&l, row), &wx)| wx * row[l - 1]).sum()
}

fn weak_from_flows(f: &[Vec<f64>], w: &[f64]) -> WeakPartition {
    let m = f.first().map_or(0, |r| r.len());
    let gamma = f
        .iter()
        .zip(w)
        .map(|(row, &wx)| {
            let g: Vec<f64> = row.iter().map(|v| (v / wx).clamp(0.0, 1.0)).collect();
            let s: f64 = g.iter().sum();
            if s > 1.0 {
                g.iter().map(|v| v / s).collect()
            } else {
                g
            }
        })
        .collect();
    WeakPartition { n_agents: m, gamma }
}

fn weak_from_labels(labels: &[usize], m: usize) -> WeakPartition {
    WeakPartition::from_labeling(&PartitionLabeling { n_agents: m, labels: labels.to_vec() })
}

/// Largest share wins; 0 when the unrouted share is largest.
fn round(weak: &WeakPartition) -> Vec<usize> {
    weak.gamma
        .iter()
        .map(|row| {
            let mut best = (0, 1.0 - row.iter().sum::<f64>());
            for (i, &g) in row.iter().enumerate() {
                if g > best.1 {
                    best = (i + 1, g);
                }
            }
            best.0
        })
        .collect()
}

/// Per-cell masses of atom `x`: `f[x][i]`.
fn cell_flows(weak: &WeakPartition, w: &[f64]) -> Vec<Vec<f64>> {
    weak.gamma.iter().zip(w).map(|(row, &wx)| row.iter().map(|g| g * wx).collect()).collect()
}

fn product_plan(f1: &[Vec<f64>], f2: &[Vec<f64>], cz: &[Vec<f64>]) -> TransportPlan {
    let m = f1.first().or(f2.first()).map_or(0, |r| r.len());
    let r: Vec<f64> = (0..m).map(|i| f1.iter().map(|row| row[i]).sum()).collect();
    let mut entries = Vec::new();
    let mut value = 0.0;
    for (x, a) in f1.iter().enumerate() {
        for (y, b) in f2.iter().enumerate() {
            let mass: f64 = (0..m).filter(|&i| r[i] > 0.0).map(|i| a[i] * b[i] / r[i]).sum();
            if mass > 1e-15 {
                value += mass * cz[x][y];
                entries.push(PlanEntry { i: x, j: y, mass });
            }
        }
    }
    TransportPlan { n_rows: f1.len(), n_cols: f2.len(), entries, value }
}

/// Solves the restricted transport problem through its congruent
/// partition.
///
/// The value and a weak partition come from an exact linear program over
/// the flows through every site. Prices are taken from the smoothed
/// maximizer of `Xi` when the strong partition it induces is congruent and
/// optimal, and from the program's duals otherwise.
pub fn solve_congruent(mu: &DiscreteMeasure, nu: &DiscreteMeasure, sites: &SiteSet, costs: &CostPair) -> Result<Congruent> {
    let (a, b) = (mu.total_mass(), nu.total_mass());
    if (a - b).abs() > 1e-9 {
        return Err(Error::Unbalanced { left: a, right: b });
    }
    if mu.is_empty() || nu.is_empty() {
        return Err(Error::InvalidInput("empty measure".into()));
    }
    let m = sites.len();
    let (c1, c2) = costs.tables(mu, nu, sites)?;
    let (w1, w2) = (mu.weights(), nu.weights());
    let lp = flow_lp(&c1, &c2, w1, w2, false)?;
    let mass_tol = 1e-9 * (1.0 + a);
    let vtol = 1e-9 * (1.0 + lp.value.abs());

    let mut candidate = None;
    if let Ok(mut p) = smooth_prices(&c1, &c2, w1, w2, false) {
        let mean = p.iter().sum::<f64>() / m as f64;
        p.iter_mut().for_each(|v| *v -= mean);
        let l1 = strong_labels(&c1, &p, 1.0, false);
        let l2 = strong_labels(&c2, &p, -1.0, false);
        let (m1, m2) = (label_masses(&l1, w1, m), label_masses(&l2, w2, m));
        let congruent = m1.iter().zip(&m2).all(|(x, y)| (x - y).abs() <= mass_tol);
        let cost = labels_cost(&l1, &c1, w1) + labels_cost(&l2, &c2, w2);
        let (xi, _) = xi_tables(&p, &c1, &c2, w1, w2, false);
        if congruent && (cost - lp.value).abs() <= vtol && (xi - lp.value).abs() <= vtol {
            candidate = Some((p, l1, l2));
        }
    }
    let strong = candidate.is_some();
    let (prices, weak_mu, weak_nu) = match candidate {
        Some((p, l1, l2)) => (p, weak_from_labels(&l1, m), weak_from_labels(&l2, m)),
        None => {
            let mut p = lp.prices.clone();
            let mean = p.iter().sum::<f64>() / m as f64;
            p.iter_mut().for_each(|v| *v -= mean);
            (p, weak_from_flows(&lp.f1, w1), weak_from_flows(&lp.f2, w2))
        }
    };
    let f1 = cell_flows(&weak_mu, w1);
    let f2 = cell_flows(&weak_nu, w2);
    let cell_masses = (0..m).map(|i| f1.iter().map(|r| r[i]).sum()).collect();
    let cz: Vec<Vec<f64>> =
        c1.iter().map(|r1| c2.iter().map(|r2| r1.iter().zip(r2).map(|(x, y)| x + y).fold(f64::INFINITY, f64::min)).collect()).collect();
    let plan = product_plan(&f1, &f2, &cz);
    let (dual, _) = xi_tables(&prices, &c1, &c2, w1, w2, false);
    Ok(Congruent {
        prices,
        labels_mu: PartitionLabeling { n_agents: m, labels: round(&weak_mu) },
        labels_nu: PartitionLabeling { n_agents: m, labels: round(&weak_nu) },
        weak_mu,
        weak_nu,
        cell_masses,
        plan,
        value: lp.value,
        dual_value: dual,
        strong,
    })
}

/// New sites with the cell objectives before and after the move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub sites: SiteSet,
    /// `sum_i int c1(., z_i) d mu_i + int c2(., z_i) d nu_i` at the old sites.
    pub before: f64,
    /// The same sum at the new sites; an upper bound for the new value.
    pub after: f64,
}

/// Moves every site to a minimizer of its cell objective. Quadratic costs
/// use the weighted centroid; other powers a descent started there. A site
/// stays put when its cell is empty or when no better point was found.
pub fn improve_sites(
    sites: &SiteSet,
    part: &Congruent,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    costs: &CostPair,
) -> Result<Improvement> {
    let m = sites.len();
    if part.weak_mu.n_agents != m || part.weak_mu.gamma.len() != mu.len() || part.weak_nu.gamma.len() != nu.len() {
        return Err(Error::Dimension("partition does not match the sites and measures".into()));
    }
    let f1 = cell_flows(&part.weak_mu, mu.weights());
    let f2 = cell_flows(&part.weak_nu, nu.weights());
    let (c1, c2) = costs.tables(mu, nu, sites)?;
    let before: f64 = (0..m).map(|i| cell_cost_table(&c1, &c2, &f1, &f2, i)).sum();
    let Some((a, b, r)) = costs.geometric() else {
        return Ok(Improvement { sites: sites.clone(), before, after: before });
    };
    let mut new_sites = sites.sites.clone();
    let mut after = 0.0;
    for i in 0..m {
        let objective = |z: &[f64]| -> f64 {
            let s1: f64 = (0..mu.len()).filter(|&x| f1[x][i] > 0.0).map(|x| a * f1[x][i] * power(mu.point(x), z, r)).sum();
            let s2: f64 = (0..nu.len()).filter(|&y| f2[y][i] > 0.0).map(|y| b * f2[y][i] * power(nu.point(y), z, r)).sum();
            s1 + s2
        };
        let old = &sites.sites[i];
        let old_val = objective(old);
        let mass: f64 = (0..mu.len()).map(|x| a * f1[x][i]).sum::<f64>() + (0..nu.len()).map(|y| b * f2[y][i]).sum::<f64>();
        if !(mass > 0.0) {
            after += old_val;
            continue;
        }
        let d = sites.dim();
        let mut centroid = vec![0.0; d];
        for x in 0..mu.len() {
            for k in 0..d {
                centroid[k] += a * f1[x][i] * mu.point(x)[k];
            }
        }
        for y in 0..nu.len() {
            for k in 0..d {
                centroid[k] += b * f2[y][i] * nu.point(y)[k];
            }
        }
        centroid.iter_mut().for_each(|v| *v /= mass);
        let cand = if r == 2.0 { centroid } else { descend(&objective, centroid, r, &f1, &f2, i, mu, nu, a, b) };
        let val = objective(&cand);
        if val < old_val {
            new_sites[i] = cand;
            after += val;
        } else {
            after += old_val;
        }
    }
    Ok(Improvement { sites: SiteSet::new(new_sites)?, before, after })
}

fn cell_cost_table(c1: &[Vec<f64>], c2: &[Vec<f64>], f1: &[Vec<f64>], f2: &[Vec<f64>], i: usize) -> f64 {
    c1.iter().zip(f1).map(|(c, f)| c[i] * f[i]).sum::<f64>() + c2.iter().zip(f2).map(|(c, f)| c[i] * f[i]).sum::<f64>()
}

/// Gradient descent with backtracking on a cell objective.
#[allow(clippy::too_many_arguments)]
fn descend(
    objective: &dyn Fn(&[f64]) -> f64,
    start: Vec<f64>,
    r: f64,
    f1: &[Vec<f64>],
    f2: &[Vec<f64>],
    i: usize,
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    a: f64,
    b: f64,
) -> Vec<f64> {
    let d = start.len();
    let grad = |z: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; d];
        let mut add = |p: &[f64], wt: f64| {
            let dist = sq_dist(p, z).sqrt();
            if dist > 0.0 {
                let s = wt * r * dist.powf(r - 2.0);
                for k in 0..d {
                    g[k] += s * (z[k] - p[k]);
                }
            }
        };
        for x in 0..mu.len() {
            if f1[x][i] > 0.0 {
                add(mu.point(x), a * f1[x][i]);
            }
        }
        for y in 0..nu.len() {
            if f2[y][i] > 0.0 {
                add(nu.point(y), b * f2[y][i]);
            }
        }
        g
    };
    let mut z = start;
    let mut fz = objective(&z);
    let mut t = 1.0;
    for _ in 0..500 {
        let g = grad(&z);
        let gn: f64 = g.iter().map(|v| v * v).sum();
        if gn < 1e-30 {
            break;
        }
        let mut moved = false;
        while t > 1e-16 {
            let trial: Vec<f64> = z.iter().zip(&g).map(|(v, gv)| v - t * gv).collect();
            let ft = objective(&trial);
            if ft <= fz - 1e-4 * t * gn {
                z = trial;
                fz = ft;
                moved = true;
                t *= 2.0;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    z
}

/// Sites and restricted values along the improvement loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LloydTrace {
    pub sites: Vec<SiteSet>,
    /// `c^{Z^k}(mu, nu)` for every iterate.
    pub values: Vec<f64>,
    /// Whether the loop stopped on a relative change below `1e-9`.
    pub settled: bool,
}

impl LloydTrace {
    /// Largest increase between consecutive values.
    pub fn max_increase(&self) -> f64 {
        self.values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// `iter,value` lines with a header.
    pub fn csv(&self) -> String {
        let mut out = String::from("iter,value\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

/// Alternates congruent solves and site improvements.
pub fn lloyd_loop(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    sites0: &SiteSet,
    costs: &CostPair,
    iters: usize,
) -> Result<LloydTrace> {
    if iters == 0 {
        return Err(Error::InvalidInput("at least one iteration is needed".into()));
    }
    let mut sites = sites0.clone();
    let mut part = solve_congruent(mu, nu, &sites, costs)?;
    let mut trace = LloydTrace { sites: vec![sites.clone()], values: vec![part.value], settled: false };
    for _ in 0..iters {
        let imp = improve_sites(&sites, &part, mu, nu, costs)?;
        sites = imp.sites;
        part = solve_congruent(mu, nu, &sites, costs)?;
        let prev = *trace.values.last().unwrap();
        trace.sites.push(sites.clone());
        trace.values.push(part.value);
        if (prev - part.value).abs() <= 1e-9 * prev.abs().max(1e-300) {
            trace.settled = true;
            break;
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub restricted: f64,
    pub exact: f64,
    pub gap: f64,
}

/// `c^{Z_m}(mu, nu) - c(mu, nu)`, both by the transport solver.
pub fn gap_phi(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    sites: &SiteSet,
    costs: &CostPair,
    exact: &[Vec<f64>],
) -> Result<Gap> {
    let cz = czm_matrix(mu, nu, sites, costs)?;
    let restricted = solve_kantorovich(mu, nu, &cz, Sense::Min, Balance::Balanced)?.plan.value;
    let exact = solve_kantorovich(mu, nu, exact, Sense::Min, Balance::Balanced)?.plan.value;
    Ok(Gap { restricted, exact, gap: restricted - exact })
}

fn line_atoms(m: &DiscreteMeasure, name: &str) -> Result<Vec<(f64, f64)>> {
    if m.dim() != 1 || !m.has_coordinates() {
        return Err(Error::Dimension(format!("{name} must live on the line")));
    }
    let mut a: Vec<(f64, f64)> = (0..m.len()).map(|k| (m.point(k)[0], m.weights()[k])).collect();
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(a)
}

/// `W_q` on the line through the monotone coupling of quantiles.
pub fn w1d(mu: &DiscreteMeasure, nu: &DiscreteMeasure, q: f64) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::InvalidInput(format!("exponent {q} must be at least 1")));
    }
    let (ta, tb) = (mu.total_mass(), nu.total_mass());
    if (ta - tb).abs() > 1e-9 {
        return Err(Error::Unbalanced { left: ta, right: tb });
    }
    let a = line_atoms(mu, "mu")?;
    let b = line_atoms(nu, "nu")?;
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a.first().map_or(0.0, |p| p.1), b.first().map_or(0.0, |p| p.1));
    let mut total = 0.0;
    while i < a.len() && j < b.len() {
        let t = ra.min(rb);
        total += t * (a[i].0 - b[j].0).abs().powf(q);
        ra -= t;
        rb -= t;
        if ra <= rb {
            i += 1;
            if i < a.len() {
                ra = a[i].1;
            }
        } else {
            j += 1;
            if j < b.len() {
                rb = b[j].1;
            }
        }
    }
    Ok(total.powf(1.0 / q))
}

/// `((1 - s) I + s T)_# mu` for the optimal assignment `T` between two
/// clouds of equally weighted atoms.
pub fn mccann_interpolate(mu: &DiscreteMeasure, nu: &DiscreteMeasure, s: f64) -> Result<DiscreteMeasure> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidInput(format!("time {s} outside [0, 1]")));
    }
    if mu.len() != nu.len() {
        return Err(Error::Dimension(format!("clouds of {} and {} atoms", mu.len(), nu.len())));
    }
    if mu.dim() != nu.dim() || !mu.has_coordinates() || !nu.has_coordinates() {
        return Err(Error::Dimension("clouds need coordinates of equal dimension".into()));
    }
    let w0 = mu.weights().first().copied().unwrap_or(0.0);
    if mu.weights().iter().chain(nu.weights()).any(|&w| (w - w0).abs() > 1e-12 * w0) {
        return Err(Error::InvalidInput("clouds must carry equal weights".into()));
    }
    let theta: Vec<Vec<f64>> =
        (0..mu.len()).map(|x| (0..nu.len()).map(|y| -sq_dist(mu.point(x), nu.point(y))).collect()).collect();
    let perm = solve_assignment(&theta)?.perm;
    let points: Vec<Vec<f64>> = (0..mu.len())
        .map(|x| mu.point(x).iter().zip(nu.point(perm[x])).map(|(a, b)| (1.0 - s) * a + s * b).collect())
        .collect();
    DiscreteMeasure::new(mu.dim(), points, mu.weights().to_vec())
}

/// Hedonic market equilibrium with a null commodity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hedonic {
    pub prices: Vec<f64>,
    /// Commodity bought by every consumer, 0 for none.
    pub consumers: PartitionLabeling,
    /// Commodity made by every producer, 0 for none.
    pub producers: PartitionLabeling,
    pub weak_consumers: WeakPartition,
    pub weak_producers: WeakPartition,
    pub demand: Vec<f64>,
    pub supply: Vec<f64>,
    /// Maximum of the truncated dual, equal to the minimal matching cost.
    pub value: f64,
    /// Total gain from trade, `-value`.
    pub surplus: f64,
    pub strong: bool,
}

/// Prices balancing supply and demand for every commodity. `c1` is the
/// consumers' loss, `c2` the producers' cost; either side may stay out.
pub fn hedonic_equilibrium(mu: &DiscreteMeasure, nu: &DiscreteMeasure, sites: &SiteSet, costs: &CostPair) -> Result<Hedonic> {
    let m = sites.len();
    let (c1, c2) = costs.tables(mu, nu, sites)?;
    let (w1, w2) = (mu.weights(), nu.weights());
    let lp = flow_lp(&c1, &c2, w1, w2, true)?;
    let mass_tol = 1e-9 * (1.0 + mu.total_mass() + nu.total_mass());
    let vtol = 1e-9 * (1.0 + lp.value.abs());
    let accept = |p: &[f64]| -> Option<(Vec<usize>, Vec<usize>)> {
        let l1 = strong_labels(&c1, p, 1.0, true);
        let l2 = strong_labels(&c2, p, -1.0, true);
        let (d, s) = (label_masses(&l1, w1, m), label_masses(&l2, w2, m));
        let balanced = (1..=m).all(|i| (d[i] - s[i]).abs() <= mass_tol);
        let cost = labels_cost(&l1, &c1, w1) + labels_cost(&l2, &c2, w2);
        let (xi, _) = xi_tables(p, &c1, &c2, w1, w2, true);
        (balanced && (cost - lp.value).abs() <= vtol && (xi - lp.value).abs() <= vtol).then_some((l1, l2))
    };
    let mut strong = None;
    if let Ok(p) = smooth_prices(&c1, &c2, w1, w2, true) {
        let p = settle_idle(p, &c1, &c2, &lp.f1);
        strong = accept(&p).map(|l| (p, l));
    }
    let is_strong = strong.is_some();
    let (prices, weak_c, weak_p) = match strong {
        Some((p, (l1, l2))) => (p, weak_from_labels(&l1, m), weak_from_labels(&l2, m)),
        None => (settle_idle(lp.prices.clone(), &c1, &c2, &lp.f1), weak_from_flows(&lp.f1, w1), weak_from_flows(&lp.f2, w2)),
    };
    let demand = weak_c.masses(mu);
    let supply = weak_p.masses(nu);
    let (value, _) = xi_tables(&prices, &c1, &c2, w1, w2, true);
    Ok(Hedonic {
        prices,
        consumers: PartitionLabeling { n_agents: m, labels: round(&weak_c) },
        producers: PartitionLabeling { n_agents: m, labels: round(&weak_p) },
        weak_consumers: weak_c,
        weak_producers: weak_p,
        demand,
        supply,
        value,
        surplus: -value,
        strong: is_strong,
    })
}

/// Moves the price of every untraded commodity to the point nearest 0 of
/// the interval where nobody strictly prefers it.
fn settle_idle(mut p: Vec<f64>, c1: &[Vec<f64>], c2: &[Vec<f64>], f1: &[Vec<f64>]) -> Vec<f64> {
    let m = p.len();
    let traded: Vec<bool> = (0..m).map(|i| f1.iter().map(|r| r[i]).sum::<f64>() > 1e-15).collect();
    let best_other = |row: &[f64], p: &[f64], sign: f64| -> f64 {
        (0..m).filter(|&k| traded[k]).map(|k| row[k] + sign * p[k]).fold(0.0f64, f64::min)
    };
    let lows: Vec<f64> = c1.iter().map(|r| best_other(r, &p, 1.0)).collect();
    let highs: Vec<f64> = c2.iter().map(|r| best_other(r, &p, -1.0)).collect();
    for i in (0..m).filter(|&i| !traded[i]) {
        let lo = c1.iter().zip(&lows).map(|(r, v)| v - r[i]).fold(f64::NEG_INFINITY, f64::max);
        let hi = c2.iter().zip(&highs).map(|(r, v)| r[i] - v).fold(f64::INFINITY, f64::min);
        if lo <= hi {
            p[i] = 0.0f64.clamp(lo, hi);
        }
    }
    p
}
