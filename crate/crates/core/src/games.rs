//! Coalition games over partition values, core tests and Nash audits.
//!
//! Players are numbered from 0 and a coalition is a bitmask with bit `i`
//! set when player `i` belongs to it.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{minimize, ColumnSource, LpStatus};
use crate::measures::{check_increasing, CapacitySpec, DiscreteMeasure, FieldValues, PartitionLabeling};
use crate::semidiscrete::{profits, single_agent_value, solve_prices};

/// Largest number of players a [`CoalitionGame`] may have.
pub const MAX_PLAYERS: usize = 20;

/// Largest number of agents for which partition games are enumerated.
pub const MAX_ENUMERATED: usize = 12;

const SLACK: f64 = 1e-9;

/// A transferable utility game, `nu[mask]` for every coalition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GameRepr", into = "GameRepr")]
pub struct CoalitionGame {
    n: usize,
    nu: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GameRepr {
    n: usize,
    nu: BTreeMap<u32, f64>,
}

impl TryFrom<GameRepr> for CoalitionGame {
    type Error = Error;

    fn try_from(r: GameRepr) -> Result<Self> {
        check_players(r.n)?;
        let mut nu = vec![0.0; 1 << r.n];
        for (&mask, &v) in &r.nu {
            if mask as usize >= nu.len() {
                return Err(Error::InvalidInput(format!("coalition {mask} is out of range for {} players", r.n)));
            }
            nu[mask as usize] = v;
        }
        CoalitionGame::new(r.n, nu)
    }
}

impl From<CoalitionGame> for GameRepr {
    fn from(g: CoalitionGame) -> Self {
        let nu = (1..g.nu.len() as u32).map(|s| (s, g.nu[s as usize])).collect();
        GameRepr { n: g.n, nu }
    }
}

fn check_players(n: usize) -> Result<()> {
    if n == 0 || n > MAX_PLAYERS {
        return Err(Error::InvalidInput(format!("number of players must be in 1..={MAX_PLAYERS}, got {n}")));
    }
    Ok(())
}

impl CoalitionGame {
    /// `nu` has `2^n` entries and `nu[0] = 0`.
    pub fn new(n: usize, nu: Vec<f64>) -> Result<Self> {
        check_players(n)?;
        if nu.len() != 1 << n {
            return Err(Error::Dimension(format!("{} values for {} coalitions", nu.len(), 1u64 << n)));
        }
        if nu[0] != 0.0 {
            return Err(Error::InvalidInput(format!("the empty coalition must be worth 0, got {}", nu[0])));
        }
        if let Some(s) = nu.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("value of coalition {s} is not finite")));
        }
        Ok(CoalitionGame { n, nu })
    }

    pub fn from_fn(n: usize, f: impl Fn(u32) -> f64) -> Result<Self> {
        check_players(n)?;
        let nu = (0..1u32 << n).map(|s| if s == 0 { 0.0 } else { f(s) }).collect();
        Self::new(n, nu)
    }

    /// `nu(J) = sum_{i in J} a_i`.
    pub fn additive(a: &[f64]) -> Result<Self> {
        Self::from_fn(a.len(), |s| members(s, a.len()).map(|i| a[i]).sum())
    }

    /// `nu(J) = w(X - union_{j not in J} A_j)` for sets `A_j` of atoms with
    /// weights `w`.
    pub fn cover(weights: &[f64], sets: &[Vec<usize>]) -> Result<Self> {
        let n = sets.len();
        if let Some(&k) = sets.iter().flatten().find(|&&k| k >= weights.len()) {
            return Err(Error::Dimension(format!("atom {k} outside {} atoms", weights.len())));
        }
        let total: f64 = weights.iter().sum();
        Self::from_fn(n, |s| {
            let mut hit = vec![false; weights.len()];
            for j in (0..n).filter(|&j| s >> j & 1 == 0) {
                for &k in &sets[j] {
                    hit[k] = true;
                }
            }
            total - weights.iter().zip(&hit).filter(|(_, &h)| h).map(|(w, _)| w).sum::<f64>()
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn value(&self, mask: u32) -> f64 {
        self.nu[mask as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.nu
    }

    pub fn full(&self) -> u32 {
        ((1u64 << self.n) - 1) as u32
    }

    pub fn grand(&self) -> f64 {
        self.nu[self.full() as usize]
    }
}

fn members(mask: u32, n: usize) -> impl Iterator<Item = usize> {
    (0..n).filter(move |&i| mask >> i & 1 == 1)
}

/// A weight on one coalition of a balanced collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedWeight {
    pub coalition: u32,
    pub weight: f64,
}

/// Outcome of the core test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "core", rename_all = "lowercase")]
pub enum CoreVerdict {
    /// `imputation` is efficient and no coalition can improve on it.
    Nonempty { imputation: Vec<f64>, bound: f64 },
    /// The balanced collection satisfies `sum lambda_J nu(J) = bound > nu(I)`.
    Empty { certificate: Vec<BalancedWeight>, bound: f64 },
}

impl CoreVerdict {
    pub fn is_nonempty(&self) -> bool {
        matches!(self, CoreVerdict::Nonempty { .. })
    }

    /// `max sum lambda_J nu(J)` over balanced collections, which equals
    /// `min sum x_i` over coalition-rational payoffs.
    pub fn bound(&self) -> f64 {
        match self {
            CoreVerdict::Nonempty { bound, .. } | CoreVerdict::Empty { bound, .. } => *bound,
        }
    }
}

struct Bondareva<'a>(&'a CoalitionGame);

impl ColumnSource for Bondareva<'_> {
    fn n_rows(&self) -> usize {
        self.0.n
    }

    fn n_cols(&self) -> usize {
        self.0.nu.len() - 1
    }

    fn cost(&self, j: usize) -> f64 {
        -self.0.nu[j + 1]
    }

    fn column(&self, j: usize, out: &mut Vec<(usize, f64)>) {
        out.extend(members(j as u32 + 1, self.0.n).map(|i| (i, 1.0)));
    }
}

/// Decides whether the core is empty.
///
/// Solves `max sum lambda_J nu(J)` subject to `sum_{J ni i} lambda_J = 1`,
/// with one column per coalition generated on demand. The simplex
/// multipliers give the cheapest coalition-rational payoff, which is shifted
/// equally onto `sum x = nu(I)` when the core is nonempty.
pub fn core_nonempty(g: &CoalitionGame) -> CoreVerdict {
    let sol = minimize(&Bondareva(g), &vec![1.0; g.n]);
    // singletons with weight one are always feasible and weights are at most one
    assert_eq!(sol.status, LpStatus::Optimal, "balanced collection LP is feasible and bounded");
    let bound = -sol.value;
    let grand = g.grand();
    if bound <= grand + SLACK {
        let shift = (grand - bound) / g.n as f64;
        let imputation = sol.y.iter().map(|y| -y + shift).collect();
        CoreVerdict::Nonempty { imputation, bound }
    } else {
        let certificate = sol
            .x
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 1e-12)
            .map(|(j, &w)| BalancedWeight { coalition: j as u32 + 1, weight: w })
            .collect();
        CoreVerdict::Empty { certificate, bound }
    }
}

/// Coalition with the largest excess `nu(J) - x(J)`.
pub fn max_excess(g: &CoalitionGame, x: &[f64]) -> (u32, f64) {
    (1..=g.full())
        .into_par_iter()
        .map(|s| (s, g.value(s) - members(s, g.n).map(|i| x[i]).sum::<f64>()))
        .reduce(|| (0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
}

/// Efficient up to `tol` and no coalition gains more than `tol`.
pub fn in_core(g: &CoalitionGame, x: &[f64], tol: f64) -> bool {
    x.len() == g.n && (x.iter().sum::<f64>() - g.grand()).abs() <= tol && max_excess(g, x).1 <= tol
}

/// A failed inequality between two coalitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub first: u32,
    pub second: u32,
    /// Amount by which the inequality fails.
    pub excess: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub holds: bool,
    /// Worst violation, when there is one.
    pub witness: Option<Violation>,
}

fn worst(a: Option<Violation>, b: Option<Violation>) -> Option<Violation> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.excess > x.excess { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

fn verdict(w: Option<Violation>) -> PropertyCheck {
    PropertyCheck { holds: w.map_or(true, |v| v.excess <= SLACK), witness: w.filter(|v| v.excess > SLACK) }
}

/// `nu(S + T) >= nu(S) + nu(T)` for all disjoint nonempty `S`, `T`.
pub fn is_superadditive(g: &CoalitionGame) -> PropertyCheck {
    let full = g.full();
    let w = (1..full)
        .into_par_iter()
        .map(|s| {
            let rest = full ^ s;
            let mut out: Option<Violation> = None;
            let mut t = rest;
            while t > 0 {
                if t > s {
                    let excess = g.value(s) + g.value(t) - g.value(s | t);
                    out = worst(out, Some(Violation { first: s, second: t, excess }));
                }
                t = (t - 1) & rest;
            }
            out
        })
        .reduce(|| None, worst);
    verdict(w)
}

/// `nu(S) + nu(T) <= nu(S + T) + nu(S T)` for all `S`, `T`, checked through
/// the equivalent condition on pairs `S + i`, `S + j`.
pub fn is_supermodular(g: &CoalitionGame) -> PropertyCheck {
    let n = g.n;
    let w = (0..=g.full())
        .into_par_iter()
        .map(|s| {
            let mut out: Option<Violation> = None;
            for i in (0..n).filter(|&i| s >> i & 1 == 0) {
                for j in (i + 1..n).filter(|&j| s >> j & 1 == 0) {
                    let (a, b) = (s | 1 << i, s | 1 << j);
                    let excess = g.value(a) + g.value(b) - g.value(a | b) - g.value(s);
                    out = worst(out, Some(Violation { first: a, second: b, excess }));
                }
            }
            out
        })
        .reduce(|| None, worst);
    verdict(w)
}

/// Marginal contributions along `order`, a permutation of the players.
pub fn greedy_imputation(g: &CoalitionGame, order: &[usize]) -> Result<Vec<f64>> {
    let mut seen = vec![false; g.n];
    if order.len() != g.n || order.iter().any(|&i| i >= g.n || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::InvalidInput(format!("{order:?} is not a permutation of 0..{}", g.n)));
    }
    let mut x = vec![0.0; g.n];
    let mut s = 0u32;
    for &i in order {
        x[i] = g.value(s | 1 << i) - g.value(s);
        s |= 1 << i;
    }
    Ok(x)
}

fn check_agents(theta: &FieldValues, mu: &DiscreteMeasure, m: &[f64]) -> Result<usize> {
    let n = theta.n_agents();
    if m.len() != n {
        return Err(Error::Dimension(format!("{} capacities for {n} agents", m.len())));
    }
    if theta.n_atoms() != mu.len() {
        return Err(Error::Dimension(format!("field has {} atoms, measure {}", theta.n_atoms(), mu.len())));
    }
    if n == 0 || n > MAX_ENUMERATED {
        return Err(Error::InvalidInput(format!("coalitions are enumerated for 1..={MAX_ENUMERATED} agents, got {n}")));
    }
    Ok(n)
}

/// Super-agents `theta_J = max_{i in J} theta_i` and the complement, the
/// latter absent for the grand coalition.
fn super_agents(theta: &FieldValues, mask: u32) -> Vec<Vec<f64>> {
    let n = theta.n_agents();
    let inside: Vec<usize> = members(mask, n).collect();
    let outside: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 0).collect();
    let mut rows = vec![theta.max_over(&inside)];
    if !outside.is_empty() {
        rows.push(theta.max_over(&outside));
    }
    rows
}

fn capacity_split(m: &[f64], mask: u32) -> (f64, f64) {
    m.iter().enumerate().fold((0.0, 0.0), |(a, b), (i, &v)| if mask >> i & 1 == 1 { (a + v, b) } else { (a, b + v) })
}

fn coalition_problem(
    theta: &FieldValues,
    mu: &DiscreteMeasure,
    mask: u32,
    mj: f64,
    mc: f64,
) -> Result<crate::semidiscrete::SDResult> {
    let rows = super_agents(theta, mask);
    let caps = if rows.len() == 2 { vec![mj, mc] } else { vec![mj] };
    let field = FieldValues::from_rows(&rows)?;
    solve_prices(mu, &field, &CapacitySpec::at_most(caps)?, None)
}

/// Surplus game: `nu(J)` is the value of the super-agent `J` competing with
/// the complement `J^-` under at-most capacities `m_J`, `m_{J^-}`.
pub fn surplus_game(theta: &FieldValues, m: &CapacitySpec, mu: &DiscreteMeasure) -> Result<CoalitionGame> {
    let n = check_agents(theta, mu, &m.m)?;
    let nu = (0..1u32 << n)
        .into_par_iter()
        .map(|s| {
            if s == 0 {
                return Ok(0.0);
            }
            let (mj, mc) = capacity_split(&m.m, s);
            Ok(coalition_problem(theta, mu, s, mj, mc)?.values[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    CoalitionGame::new(n, nu)
}

/// Profit game together with the coalitions at which the derivative is
/// doubtful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfitGame {
    pub game: CoalitionGame,
    /// One-sided difference quotients differ by more than `1e-3`.
    pub kinks: Vec<u32>,
    /// Capacities were clamped to `mu(X)` and the left quotient was used.
    pub one_sided: Vec<u32>,
}

/// Self-profit game `nu(J) = m_J dSigma/dm_J` by finite differences with
/// step `1e-4 m_J`.
///
/// When `m_J + m_{J^-}` reaches `mu(X)` both capacities are scaled onto
/// `mu(X)` and the left quotient is reported.
pub fn profit_game(theta: &FieldValues, m: &CapacitySpec, mu: &DiscreteMeasure) -> Result<ProfitGame> {
    let n = check_agents(theta, mu, &m.m)?;
    let total = mu.total_mass();
    let sigma = |s: u32, mj: f64, mc: f64| coalition_problem(theta, mu, s, mj, mc).map(|r| r.dual_value);
    let rows = (0..1u32 << n)
        .into_par_iter()
        .map(|s| {
            if s == 0 {
                return Ok((0.0, false, false));
            }
            let (mut mj, mut mc) = capacity_split(&m.m, s);
            if mj <= 0.0 {
                return Ok((0.0, false, false));
            }
            if mj + mc > total {
                let k = total / (mj + mc);
                mj *= k;
                mc *= k;
            }
            let h = 1e-4 * mj;
            let s0 = sigma(s, mj, mc)?;
            let left = (s0 - sigma(s, mj - h, mc)?) / h;
            if mj + mc + h > total * (1.0 + 1e-12) {
                return Ok((mj * left, false, true));
            }
            let right = (sigma(s, mj + h, mc)? - s0) / h;
            Ok((mj * 0.5 * (left + right), (right - left).abs() > 1e-3, false))
        })
        .collect::<Result<Vec<_>>>()?;
    let kinks = rows.iter().enumerate().filter(|(_, r)| r.1).map(|(s, _)| s as u32).collect();
    let one_sided = rows.iter().enumerate().filter(|(_, r)| r.2).map(|(s, _)| s as u32).collect();
    let game = CoalitionGame::new(n, rows.into_iter().map(|r| r.0).collect())?;
    Ok(ProfitGame { game, kinks, one_sided })
}

/// Best unilateral deviation found by a grid audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    /// Index of the deviating agent, from 0.
    pub agent: usize,
    pub price: Option<f64>,
    pub commission: Option<f64>,
    pub profit: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    /// Largest profit gain over all agents, at most 0 when nobody gains.
    pub improvement: f64,
    pub per_agent: Vec<f64>,
    pub best: Option<Deviation>,
    pub step: f64,
}

impl NashReport {
    pub fn is_equilibrium(&self, eps: f64) -> bool {
        self.improvement <= eps
    }
}

fn collect_report(devs: Vec<Deviation>, step: f64) -> NashReport {
    let per_agent: Vec<f64> = devs.iter().map(|d| d.profit - d.baseline).collect();
    let best = devs.into_iter().fold(None::<Deviation>, |acc, d| match acc {
        Some(a) if a.profit - a.baseline >= d.profit - d.baseline => Some(a),
        _ => Some(d),
    });
    let improvement = per_agent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    NashReport { improvement, per_agent, best, step }
}

/// Profits at flat prices and commissions. With capacities, an agent whose
/// demand exceeds `m_i` serves a uniform fraction of it.
pub fn flat_profits(
    p: &[f64],
    q: &[f64],
    theta: &FieldValues,
    mu: &DiscreteMeasure,
    m: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let pr = profits(p, q, theta, mu)?;
    Ok(match m {
        None => pr.profits,
        Some(cap) => (0..p.len())
            .map(|i| {
                let d = pr.masses[i];
                if d > cap[i] {
                    pr.profits[i] * cap[i] / d
                } else {
                    pr.profits[i]
                }
            })
            .collect(),
    })
}

/// Scans each agent's unilateral flat price deviations on
/// `{0, step, 2 step, ...}` up to its largest utility, and commission
/// deviations on the same grid below 1 when `q` is given.
pub fn nash_check_flat(
    p: &[f64],
    q: Option<&[f64]>,
    theta: &FieldValues,
    mu: &DiscreteMeasure,
    m: Option<&[f64]>,
    step: f64,
) -> Result<NashReport> {
    let n = p.len();
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("grid step must be positive, got {step}")));
    }
    if theta.n_agents() != n {
        return Err(Error::Dimension(format!("{n} prices for {} agents", theta.n_agents())));
    }
    if let Some(cap) = m {
        if cap.len() != n {
            return Err(Error::Dimension(format!("{} capacities for {n} agents", cap.len())));
        }
    }
    let q0 = q.map_or_else(|| vec![0.0; n], |q| q.to_vec());
    let base = flat_profits(p, &q0, theta, mu, m)?;
    let commissions: Vec<f64> = match q {
        Some(_) => (0..).map(|k| k as f64 * step).take_while(|&c| c < 1.0).collect(),
        None => vec![0.0],
    };
    let devs = (0..n)
        .map(|i| {
            let top = theta.row(i).into_iter().fold(0.0, f64::max);
            let kmax = (top / step).ceil() as usize;
            let grid: Vec<(f64, f64)> =
                (0..=kmax).flat_map(|k| commissions.iter().map(move |&c| (k as f64 * step, c))).collect();
            let best = grid
                .par_iter()
                .map(|&(pi, qi)| {
                    let mut pp = p.to_vec();
                    let mut qq = q0.clone();
                    pp[i] = pi;
                    qq[i] = qi;
                    flat_profits(&pp, &qq, theta, mu, m).map(|v| (pi, qi, v[i]))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold((p[i], q0[i], base[i]), |a, b| if b.2 > a.2 { b } else { a });
            Ok(Deviation {
                agent: i,
                price: Some(best.0),
                commission: q.map(|_| best.1),
                profit: best.2,
                baseline: base[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_report(devs, step))
}

/// Free prices `w_i(x)` with the induced partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreePrice {
    /// `charges[i][x]`.
    pub charges: Vec<Vec<f64>>,
    pub labeling: PartitionLabeling,
    /// Utility left to each consumer, 0 for the unserved.
    pub residuals: Vec<f64>,
    pub profits: Vec<f64>,
}

fn best_two(v: &[f64]) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &t) in v.iter().enumerate() {
        if t > best.1 {
            best = (i, t);
        }
    }
    let second = v.iter().enumerate().filter(|&(i, _)| i != best.0).map(|(_, &t)| t).fold(f64::NEG_INFINITY, f64::max);
    (best.0, best.1, second)
}

/// Each agent charges its lead over the best alternative (including opting
/// out) on the consumers it serves most efficiently, and nothing elsewhere.
pub fn free_price_equilibrium(theta: &FieldValues, mu: &DiscreteMeasure) -> Result<FreePrice> {
    let n = theta.n_agents();
    if theta.n_atoms() != mu.len() {
        return Err(Error::Dimension(format!("field has {} atoms, measure {}", theta.n_atoms(), mu.len())));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no agents".into()));
    }
    let mut charges = vec![vec![0.0; mu.len()]; n];
    let mut labels = vec![0; mu.len()];
    let mut residuals = vec![0.0; mu.len()];
    let mut profits = vec![0.0; n];
    for (x, &w) in mu.weights().iter().enumerate() {
        let (i, b, second) = best_two(theta.at(x));
        if b > 0.0 {
            let c = b - second.max(0.0);
            charges[i][x] = c;
            labels[x] = i + 1;
            residuals[x] = b - c;
            profits[i] += w * c;
        }
    }
    Ok(FreePrice { charges, labeling: PartitionLabeling::new(n, labels)?, residuals, profits })
}

/// Free-price profit of coalition `J` acting as one agent against the
/// others individually.
pub fn coalition_free_profit(theta: &FieldValues, mu: &DiscreteMeasure, mask: u32) -> Result<f64> {
    let n = theta.n_agents();
    if theta.n_atoms() != mu.len() {
        return Err(Error::Dimension(format!("field has {} atoms, measure {}", theta.n_atoms(), mu.len())));
    }
    if mask == 0 || (n < 32 && mask >> n != 0) {
        return Err(Error::InvalidInput(format!("coalition {mask} is not a nonempty subset of {n} agents")));
    }
    Ok(mu
        .weights()
        .iter()
        .enumerate()
        .map(|(x, &w)| {
            let t = theta.at(x);
            let inside = members(mask, n).map(|i| t[i]).fold(f64::NEG_INFINITY, f64::max);
            let outside = (0..n).filter(|&i| mask >> i & 1 == 0).map(|i| t[i]).fold(0.0, f64::max);
            w * (inside - outside).max(0.0)
        })
        .sum())
}

/// Grid audit of arbitrary per-consumer charges `charges[i][x]`.
///
/// Consumers pick the largest residual `theta_k - w_k`, ties going to the
/// larger charge, and opt out only when every residual is negative. A
/// deviating agent may charge any grid value at each atom and wins the atom
/// when its residual is at least the best alternative; since profits are
/// additive over atoms, the best grid charge is found atom by atom.
pub fn nash_check_free(charges: &[Vec<f64>], theta: &FieldValues, mu: &DiscreteMeasure, step: f64) -> Result<NashReport> {
    let n = theta.n_agents();
    if !(step > 0.0) {
        return Err(Error::InvalidInput(format!("grid step must be positive, got {step}")));
    }
    if charges.len() != n || charges.iter().any(|c| c.len() != mu.len()) || theta.n_atoms() != mu.len() {
        return Err(Error::Dimension("charges must be one row per agent and one entry per atom".into()));
    }
    let devs = (0..n)
        .into_par_iter()
        .map(|i| {
            let (mut base, mut dev) = (0.0, 0.0);
            for (x, &w) in mu.weights().iter().enumerate() {
                let t = theta.at(x);
                let r: Vec<f64> = (0..n).map(|k| t[k] - charges[k][x]).collect();
                let top = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if top >= 0.0 {
                    let winner = (0..n)
                        .filter(|&k| r[k] >= top - 1e-12)
                        .fold(None::<usize>, |a, k| match a {
                            Some(b) if charges[b][x] >= charges[k][x] => Some(b),
                            _ => Some(k),
                        })
                        .unwrap_or(0);
                    if winner == i {
                        base += w * charges[i][x];
                    }
                }
                let rival = (0..n).filter(|&k| k != i).map(|k| r[k]).fold(0.0, f64::max);
                let room = t[i] - rival;
                if room >= 0.0 {
                    dev += w * (room / step).floor() * step;
                }
            }
            Deviation { agent: i, price: None, commission: None, profit: dev.max(base), baseline: base }
        })
        .collect();
    Ok(collect_report(devs, step))
}

/// Value of the single-agent curve `F` and its left derivative.
fn curve(base: &[f64], mu: &DiscreteMeasure, m: f64) -> Result<(f64, f64)> {
    let s = single_agent_value(base, mu, m.min(mu.total_mass()))?;
    Ok((s.value, s.price))
}

fn check_family(lambda: &[f64], base: &[f64], mu: &DiscreteMeasure, m: &[f64]) -> Result<f64> {
    check_increasing(lambda)?;
    if lambda.len() != m.len() {
        return Err(Error::Dimension(format!("{} scales for {} capacities", lambda.len(), m.len())));
    }
    if base.len() != mu.len() {
        return Err(Error::Dimension(format!("{} utilities for {} atoms", base.len(), mu.len())));
    }
    if lambda.len() > MAX_ENUMERATED {
        return Err(Error::InvalidInput(format!("at most {MAX_ENUMERATED} agents, got {}", lambda.len())));
    }
    let total: f64 = m.iter().sum();
    if m.iter().any(|&v| !(v >= 0.0)) || total > mu.total_mass() * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!("capacities must be nonnegative with sum at most {}", mu.total_mass())));
    }
    Ok(total)
}

fn top_scale(lambda: &[f64], mask: u32) -> f64 {
    members(mask, lambda.len()).map(|i| lambda[i]).fold(0.0, f64::max)
}

/// Surplus game of the family `lambda_i theta` in closed form:
/// `lambda_N F(m_J)` when `J` holds the top agent, else
/// `lambda_J (F(M) - F(M - m_J))`.
pub fn scaled_surplus_game(lambda: &[f64], base: &[f64], mu: &DiscreteMeasure, m: &[f64]) -> Result<CoalitionGame> {
    let big = check_family(lambda, base, mu, m)?;
    let n = lambda.len();
    let top = 1u32 << (n - 1);
    let f_big = curve(base, mu, big)?.0;
    let nu = (0..1u32 << n)
        .map(|s| {
            if s == 0 {
                return Ok(0.0);
            }
            let (mj, _) = capacity_split(m, s);
            if s & top != 0 {
                Ok(lambda[n - 1] * curve(base, mu, mj)?.0)
            } else {
                Ok(top_scale(lambda, s) * (f_big - curve(base, mu, big - mj)?.0))
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    CoalitionGame::new(n, nu)
}

/// Profit game of the family `lambda_i theta` in closed form: `m_J lambda_J
/// F'(M)` without the top agent, and `m_J (lambda_{J^-} F'(M) + (lambda_N -
/// lambda_{J^-}) F'(m_J))` with it.
pub fn scaled_profit_game(lambda: &[f64], base: &[f64], mu: &DiscreteMeasure, m: &[f64]) -> Result<CoalitionGame> {
    let big = check_family(lambda, base, mu, m)?;
    let n = lambda.len();
    let full = ((1u64 << n) - 1) as u32;
    let top = 1u32 << (n - 1);
    let d_big = curve(base, mu, big)?.1;
    let nu = (0..=full)
        .map(|s| {
            if s == 0 {
                return Ok(0.0);
            }
            let (mj, _) = capacity_split(m, s);
            if s & top == 0 {
                return Ok(mj * top_scale(lambda, s) * d_big);
            }
            let rest = top_scale(lambda, full ^ s);
            Ok(mj * (rest * d_big + (lambda[n - 1] - rest) * curve(base, mu, mj)?.1))
        })
        .collect::<Result<Vec<f64>>>()?;
    CoalitionGame::new(n, nu)
}

/// Stability of the grand coalition for three scaled agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreePlayer {
    /// `lambda_3 / lambda_2`.
    pub ratio: f64,
    /// `G(m_1 + m_2) / (G(m_1) + G(m_2))` with `G(m) = F(M) - F(M - m)`.
    pub threshold: f64,
    pub surplus_stable: bool,
    /// Core test of the closed-form surplus game.
    pub surplus_core: bool,
    pub alpha: f64,
    pub beta: f64,
    /// `F'(M) - alpha F'(m_1 + m_3) - beta F'(m_2 + m_3)`.
    pub profit_margin: f64,
    pub profit_stable: bool,
    /// Core test of the closed-form profit game.
    pub profit_core: bool,
}

/// Closed-form stability conditions of the surplus and profit games for
/// `lambda_1 < lambda_2 < lambda_3`, cross-checked by the core LP.
pub fn three_player_stability(lambda: &[f64], m: &[f64], base: &[f64], mu: &DiscreteMeasure) -> Result<ThreePlayer> {
    if lambda.len() != 3 {
        return Err(Error::Dimension(format!("three scales expected, got {}", lambda.len())));
    }
    let big = check_family(lambda, base, mu, m)?;
    let (l1, l2, l3) = (lambda[0], lambda[1], lambda[2]);
    let (m1, m2, m3) = (m[0], m[1], m[2]);
    let f_big = curve(base, mu, big)?.0;
    let g = |v: f64| curve(base, mu, big - v).map(|c| f_big - c.0);
    let threshold = g(m1 + m2)? / (g(m1)? + g(m2)?);
    let ratio = l3 / l2;
    let d = 2.0 * m1 * (l3 - l2) + (m2 + m3) * (2.0 * l3 - l2 - l1);
    let alpha = (m1 + m3) * (l3 - l2) / d;
    let beta = (m2 + m3) * (l3 - l1) / d;
    let fp = |v: f64| curve(base, mu, v).map(|c| c.1);
    let profit_margin = fp(big)? - alpha * fp(m1 + m3)? - beta * fp(m2 + m3)?;
    Ok(ThreePlayer {
        ratio,
        threshold,
        surplus_stable: ratio > threshold,
        surplus_core: core_nonempty(&scaled_surplus_game(lambda, base, mu, m)?).is_nonempty(),
        alpha,
        beta,
        profit_margin,
        profit_stable: profit_margin > 0.0,
        profit_core: core_nonempty(&scaled_profit_game(lambda, base, mu, m)?).is_nonempty(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::discretize_density;

    fn empty3() -> CoalitionGame {
        CoalitionGame::from_fn(3, |s| match s.count_ones() {
            1 => 0.0,
            2 => 0.75,
            _ => 1.0,
        })
        .unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn grid(n: usize) -> DiscreteMeasure {
        discretize_density(|_| 1.0, 0.0, 1.0, 1, n).unwrap()
    }

    #[test]
    fn empty_core_has_half_weights_on_pairs() {
        let g = empty3();
        match core_nonempty(&g) {
            CoreVerdict::Empty { certificate, bound } => {
                assert!((bound - 1.125).abs() < 1e-12);
                let pairs: Vec<u32> = certificate.iter().map(|w| w.coalition).collect();
                assert_eq!(pairs, vec![3, 5, 6]);
                assert!(certificate.iter().all(|w| (w.weight - 0.5).abs() < 1e-12));
            }
            v => panic!("expected an empty core, got {v:?}"),
        }
        assert!(is_superadditive(&g).holds);
        let sm = is_supermodular(&g);
        assert!(!sm.holds);
        assert!(sm.witness.unwrap().excess > 0.4);
        assert!(permutations(3).iter().any(|o| !in_core(&g, &greedy_imputation(&g, o).unwrap(), 1e-9)));
    }

    #[test]
    fn additive_game_core_is_the_point() {
        let a = [0.3, -0.2, 1.5, 0.0];
        let g = CoalitionGame::additive(&a).unwrap();
        match core_nonempty(&g) {
            CoreVerdict::Nonempty { imputation, .. } => {
                for (x, y) in imputation.iter().zip(&a) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
            v => panic!("{v:?}"),
        }
        assert!(is_superadditive(&g).holds && is_supermodular(&g).holds);
        for o in permutations(4) {
            let x = greedy_imputation(&g, &o).unwrap();
            assert!(x.iter().zip(&a).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn convex_games_have_greedy_core_points() {
        let g = CoalitionGame::from_fn(5, |s| (s.count_ones() as f64).powi(2) + 0.1 * s as f64).unwrap();
        assert!(is_supermodular(&g).holds);
        assert!(core_nonempty(&g).is_nonempty());
        for o in permutations(5) {
            assert!(in_core(&g, &greedy_imputation(&g, &o).unwrap(), 1e-9));
        }
        let c = CoalitionGame::cover(&[1.0, 2.0, 0.5, 1.5], &[vec![0, 1], vec![1, 2], vec![3], vec![0, 3]]).unwrap();
        assert!(is_supermodular(&c).holds);
        assert_eq!(c.grand(), 5.0);
    }

    #[test]
    fn greedy_rejects_bad_orders() {
        let g = empty3();
        assert!(greedy_imputation(&g, &[0, 0, 1]).is_err());
        assert!(greedy_imputation(&g, &[0, 1]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = empty3();
        let s = serde_json::to_string(&g).unwrap();
        assert!(s.contains("\"3\":0.75"));
        let back: CoalitionGame = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        let sparse: CoalitionGame = serde_json::from_str(r#"{"n":2,"nu":{"3":1.0}}"#).unwrap();
        assert_eq!(sparse.value(1), 0.0);
        assert!(serde_json::from_str::<CoalitionGame>(r#"{"n":2,"nu":{"4":1.0}}"#).is_err());
        assert!(serde_json::from_str::<CoalitionGame>(r#"{"n":2,"nu":{"0":1.0}}"#).is_err());
    }

    #[test]
    fn surplus_game_single_agent() {
        let mu = grid(200);
        let t: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let theta = FieldValues::from_rows(&[t.clone()]).unwrap();
        let g = surplus_game(&theta, &CapacitySpec::at_most(vec![0.4]).unwrap(), &mu).unwrap();
        let s = single_agent_value(&t, &mu, 0.4).unwrap();
        assert!((g.value(1) - s.value).abs() < 1e-9);
    }

    #[test]
    fn surplus_game_matches_scaled_closed_forms() {
        let mu = grid(400);
        let base: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let lambda = [1.0, 2.0];
        let theta = FieldValues::from_rows(&[base.clone(), base.iter().map(|v| 2.0 * v).collect()]).unwrap();
        let g = surplus_game(&theta, &CapacitySpec::at_most(vec![0.3, 0.3]).unwrap(), &mu).unwrap();
        let f = |m: f64| single_agent_value(&base, &mu, m).unwrap().value;
        assert!((g.value(2) - 2.0 * f(0.3)).abs() < 1e-8);
        assert!((g.value(1) - (f(0.6) - f(0.3))).abs() < 1e-8);
        assert!((g.value(3) - 2.0 * f(0.6)).abs() < 1e-8);
        let closed = scaled_surplus_game(&lambda, &base, &mu, &[0.3, 0.3]).unwrap();
        for s in 1..4 {
            assert!((closed.value(s) - g.value(s)).abs() < 1e-8);
        }
        for s in 1..3u32 {
            assert!(g.value(s) + g.value(3 ^ s) <= g.grand() + 1e-8);
        }
    }

    #[test]
    fn profit_game_single_agent_and_small_capacity() {
        let mu = grid(1000);
        let t: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let theta = FieldValues::from_rows(&[t.clone()]).unwrap();
        let pg = profit_game(&theta, &CapacitySpec::at_most(vec![0.3]).unwrap(), &mu).unwrap();
        let s = single_agent_value(&t, &mu, 0.3).unwrap();
        assert!((pg.game.value(1) - 0.3 * s.price).abs() < 1e-3);
        let tiny = profit_game(&theta, &CapacitySpec::at_most(vec![1e-9]).unwrap(), &mu).unwrap();
        assert!(tiny.game.value(1).abs() < 1e-8);
        let over = profit_game(&theta, &CapacitySpec::at_most(vec![1.5]).unwrap(), &mu).unwrap();
        assert_eq!(over.one_sided, vec![1]);
    }

    #[test]
    fn profit_game_matches_scaled_closed_forms() {
        let mu = grid(2000);
        let base: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let lambda = [1.0, 1.5, 2.5];
        let m = [0.1, 0.15, 0.2];
        let rows: Vec<Vec<f64>> = lambda.iter().map(|l| base.iter().map(|v| l * v).collect()).collect();
        let theta = FieldValues::from_rows(&rows).unwrap();
        let pg = profit_game(&theta, &CapacitySpec::at_most(m.to_vec()).unwrap(), &mu).unwrap();
        let closed = scaled_profit_game(&lambda, &base, &mu, &m).unwrap();
        for s in 1..8 {
            assert!((pg.game.value(s) - closed.value(s)).abs() < 2e-3, "coalition {s}");
        }
    }

    #[test]
    fn single_agent_at_optimal_price_has_no_deviation() {
        let mu = grid(100);
        let t: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let theta = FieldValues::from_rows(&[t]).unwrap();
        let step = 1e-3;
        let scan = nash_check_flat(&[0.0], None, &theta, &mu, None, step).unwrap();
        let p = scan.best.unwrap().price.unwrap();
        let r = nash_check_flat(&[p], None, &theta, &mu, None, step).unwrap();
        assert!(r.is_equilibrium(1e-12));
        assert!((p - 0.5).abs() < 0.02);
    }

    #[test]
    fn cartel_violating_the_price_condition_is_beaten() {
        let mu = grid(200);
        let base: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let lambda = [1.0, 2.0, 2.2];
        let rows: Vec<Vec<f64>> = lambda.iter().map(|l| base.iter().map(|v| l * v).collect()).collect();
        let theta = FieldValues::from_rows(&rows).unwrap();
        // p0 maximizes p mu(theta > p), about 1/2 here
        let p0 = 0.5;
        assert!(lambda[1] * 1.0 > p0);
        let p = [lambda[0], lambda[1], p0];
        let r = nash_check_flat(&p, None, &theta, &mu, None, 1e-2).unwrap();
        assert!(r.per_agent[1] > 1e-3);
    }

    #[test]
    fn commission_cartel_is_undercut() {
        let mu = grid(100);
        let rows = vec![mu.xs(), mu.xs().iter().map(|x| 1.0 - x).collect()];
        let theta = FieldValues::from_rows(&rows).unwrap();
        let r = nash_check_flat(&[0.0, 0.0], Some(&[0.99, 0.99]), &theta, &mu, None, 0.05).unwrap();
        assert!(r.improvement > 0.05);
        let d = r.best.unwrap();
        assert!(d.commission.unwrap() < 0.99);
    }

    #[test]
    fn free_prices_on_two_lines() {
        let mu = DiscreteMeasure::on_line(&[0.2, 0.5, 0.8], vec![1.0; 3]).unwrap();
        let rows = vec![mu.xs(), mu.xs().iter().map(|x| 1.0 - x).collect()];
        let theta = FieldValues::from_rows(&rows).unwrap();
        let fp = free_price_equilibrium(&theta, &mu).unwrap();
        assert!((fp.charges[0][2] - 0.6).abs() < 1e-12);
        assert!((fp.residuals[2] - 0.2).abs() < 1e-12);
        assert_eq!(fp.labeling.labels, vec![2, 1, 1]);
        let r = nash_check_free(&fp.charges, &theta, &mu, 1e-3).unwrap();
        assert!(r.is_equilibrium(1e-12));
        let mut greedy = fp.charges.clone();
        greedy[0][2] = 0.0;
        assert!(nash_check_free(&greedy, &theta, &mu, 1e-3).unwrap().improvement > 0.5);
    }

    #[test]
    fn free_prices_single_agent_take_everything() {
        let mu = grid(10);
        let t: Vec<f64> = mu.xs().iter().map(|x| x - 0.3).collect();
        let theta = FieldValues::from_rows(&[t.clone()]).unwrap();
        let fp = free_price_equilibrium(&theta, &mu).unwrap();
        for x in 0..10 {
            assert_eq!(fp.charges[0][x], t[x].max(0.0));
            assert_eq!(fp.residuals[x], 0.0);
        }
    }

    #[test]
    fn coalitions_gain_under_free_prices() {
        let mu = grid(50);
        let xs = mu.xs();
        let rows = vec![
            xs.iter().map(|x| x * x).collect(),
            xs.iter().map(|x| 1.0 - x).collect(),
            xs.iter().map(|x| 0.5 - (x - 0.5).abs()).collect(),
        ];
        let theta = FieldValues::from_rows(&rows).unwrap();
        let fp = free_price_equilibrium(&theta, &mu).unwrap();
        for s in 1..8u32 {
            let alone: f64 = members(s, 3).map(|i| fp.profits[i]).sum();
            assert!(coalition_free_profit(&theta, &mu, s).unwrap() >= alone - 1e-12);
        }
        assert!(coalition_free_profit(&theta, &mu, 0).is_err());
    }

    #[test]
    fn three_players_flip_at_threshold() {
        let mu = grid(1000);
        let base: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let m = [0.2, 0.25, 0.3];
        let probe = three_player_stability(&[1.0, 2.0, 100.0], &m, &base, &mu).unwrap();
        assert!(probe.surplus_stable && probe.surplus_core);
        let t = probe.threshold;
        for (k, expect) in [(1.0 + 1e-6, true), (1.0 - 1e-6, false)] {
            let r = three_player_stability(&[1.0, 2.0, 2.0 * t * k], &m, &base, &mu);
            match r {
                Ok(r) => {
                    assert_eq!(r.surplus_stable, expect);
                    assert_eq!(r.surplus_core, expect);
                }
                Err(e) => assert!(t * k <= 1.0, "{e}"),
            }
        }
        assert!(probe.alpha + probe.beta < 1.0);
        assert!(three_player_stability(&[2.0, 1.0, 3.0], &m, &base, &mu).is_err());
    }
}
