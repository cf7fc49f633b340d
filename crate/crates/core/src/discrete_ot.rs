//! Finite Kantorovich and assignment problems.
//!
//! Payoffs are dense matrices `theta[x][y]` indexed by the atoms of the
//! source and target measures. In the maximization convention a dual pair
//! satisfies `xi(x) + p(y) >= theta(x, y)`; for minimization the inequality
//! flips to `xi(x) + p(y) <= c(x, y)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::bipartite::perfect_matching;
use crate::lp::hungarian::min_cost_assignment;
use crate::lp::solve_transport;
use crate::measures::DiscreteMeasure;

/// Whether the payoff is maximized or the cost minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    #[default]
    Max,
    Min,
}

/// Balanced transport requires equal total masses; relaxed transport only
/// bounds the marginals from above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    #[default]
    Balanced,
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub i: usize,
    pub j: usize,
    pub mass: f64,
}

/// Sparse coupling between the atoms of two measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<PlanEntry>,
    pub value: f64,
}

impl TransportPlan {
    fn from_dense(flow: &[f64], n: usize, m: usize, keep_rows: usize, keep_cols: usize, theta: &[Vec<f64>]) -> Self {
        let mut entries = Vec::new();
        let mut value = 0.0;
        for i in 0..keep_rows {
            for j in 0..keep_cols {
                let f = flow[i * m + j];
                if f > 1e-15 {
                    entries.push(PlanEntry { i, j, mass: f });
                    value += f * theta[i][j];
                }
            }
        }
        debug_assert!(keep_rows <= n);
        TransportPlan { n_rows: keep_rows, n_cols: keep_cols, entries, value }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut r = vec![0.0; self.n_rows];
        for e in &self.entries {
            r[e.i] += e.mass;
        }
        r
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.n_cols];
        for e in &self.entries {
            c[e.j] += e.mass;
        }
        c
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_cols]; self.n_rows];
        for e in &self.entries {
            d[e.i][e.j] += e.mass;
        }
        d
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.mass).sum()
    }

    /// `sum theta(i, j) * mass` for another payoff.
    pub fn evaluate(&self, theta: &[Vec<f64>]) -> f64 {
        self.entries.iter().map(|e| e.mass * theta[e.i][e.j]).sum()
    }

    /// Plan of a permutation with unit masses.
    pub fn from_permutation(perm: &[usize], theta: &[Vec<f64>]) -> Self {
        let entries: Vec<PlanEntry> =
            perm.iter().enumerate().map(|(i, &j)| PlanEntry { i, j, mass: 1.0 }).collect();
        let value = perm.iter().enumerate().map(|(i, &j)| theta[i][j]).sum();
        TransportPlan { n_rows: perm.len(), n_cols: perm.len(), entries, value }
    }
}

/// Potentials on the two sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPair {
    pub xi: Vec<f64>,
    pub p: Vec<f64>,
}

impl DualPair {
    pub fn value(&self, mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> f64 {
        mu.integrate(&self.xi) + nu.integrate(&self.p)
    }

    /// Worst violation of the dual constraint, zero when feasible.
    pub fn infeasibility(&self, theta: &[Vec<f64>], sense: Sense) -> f64 {
        let mut worst = 0.0f64;
        for (x, row) in theta.iter().enumerate() {
            for (y, &t) in row.iter().enumerate() {
                let s = self.xi[x] + self.p[y];
                let viol = match sense {
                    Sense::Max => t - s,
                    Sense::Min => s - t,
                };
                worst = worst.max(viol);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KantorovichSolution {
    pub plan: TransportPlan,
    pub duals: DualPair,
    pub dual_value: f64,
    /// Dual minus primal for maximization, primal minus dual for
    /// minimization; nonnegative up to rounding.
    pub gap: f64,
    pub sense: Sense,
    pub balance: Balance,
}

pub(crate) fn check_payoff(theta: &[Vec<f64>], n: usize, m: usize) -> Result<()> {
    if theta.len() != n {
        return Err(Error::Dimension(format!("payoff has {} rows for {n} source atoms", theta.len())));
    }
    for (i, row) in theta.iter().enumerate() {
        if row.len() != m {
            return Err(Error::Dimension(format!("payoff row {i} has {} entries for {m} target atoms", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("payoff row {i} is not finite")));
        }
    }
    Ok(())
}

fn dense_cost(theta: &[Vec<f64>], n: usize, m: usize, sense: Sense) -> Vec<f64> {
    let s = match sense {
        Sense::Max => -1.0,
        Sense::Min => 1.0,
    };
    let mut c = vec![0.0; n * m];
    for i in 0..theta.len() {
        for j in 0..theta[i].len() {
            c[i * m + j] = s * theta[i][j];
        }
    }
    c
}

fn balanced_masses(mu: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<()> {
    let (a, b) = (mu.total_mass(), nu.total_mass());
    if (a - b).abs() > 1e-9 {
        return Err(Error::Unbalanced { left: a, right: b });
    }
    Ok(())
}

/// Optimal coupling and dual potentials of a finite transport problem.
///
/// Balanced mode needs `|mu(X) - nu(Y)| <= 1e-9`. Relaxed maximization
/// requires `theta >= 0` and returns nonnegative potentials. Relaxed
/// minimization transports all of the lighter measure and leaves part of the
/// heavier one in place; its potentials on the heavier side are `<= 0`.
pub fn solve_kantorovich(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    theta: &[Vec<f64>],
    sense: Sense,
    balance: Balance,
) -> Result<KantorovichSolution> {
    let (n, m) = (mu.len(), nu.len());
    check_payoff(theta, n, m)?;
    if balance == Balance::Balanced {
        balanced_masses(mu, nu)?;
    }
    if sense == Sense::Max && balance == Balance::Relaxed && theta.iter().flatten().any(|&t| t < 0.0) {
        return Err(Error::InvalidInput("relaxed maximization needs a nonnegative payoff".into()));
    }
    if n == 0 || m == 0 {
        let plan = TransportPlan { n_rows: n, n_cols: m, entries: Vec::new(), value: 0.0 };
        let duals = DualPair { xi: vec![0.0; n], p: vec![0.0; m] };
        return Ok(KantorovichSolution { plan, duals, dual_value: 0.0, gap: 0.0, sense, balance });
    }
    let sgn = match sense {
        Sense::Max => -1.0,
        Sense::Min => 1.0,
    };
    let (plan, duals) = match (balance, sense) {
        (Balance::Balanced, _) => {
            let cost = dense_cost(theta, n, m, sense);
            let sol = solve_transport(mu.weights(), nu.weights(), &cost)?;
            let mut xi: Vec<f64> = sol.u.iter().map(|u| sgn * u).collect();
            let mut p: Vec<f64> = sol.v.iter().map(|v| sgn * v).collect();
            let shift = p[0];
            xi.iter_mut().for_each(|x| *x += shift);
            p.iter_mut().for_each(|y| *y -= shift);
            (TransportPlan::from_dense(&sol.flow, n, m, n, m, theta), DualPair { xi, p })
        }
        (Balance::Relaxed, Sense::Max) => {
            // virtual x0 (row n, mass nu(Y)) and y0 (column m, mass mu(X))
            let (n1, m1) = (n + 1, m + 1);
            let mut a = mu.weights().to_vec();
            a.push(nu.total_mass());
            let mut b = nu.weights().to_vec();
            b.push(mu.total_mass());
            let mut cost = vec![0.0; n1 * m1];
            for i in 0..n {
                for j in 0..m {
                    cost[i * m1 + j] = -theta[i][j];
                }
            }
            let sol = solve_transport(&a, &b, &cost)?;
            let xi_b: Vec<f64> = sol.u.iter().map(|u| -u).collect();
            let p_b: Vec<f64> = sol.v.iter().map(|v| -v).collect();
            let xi = (0..n).map(|i| xi_b[i] + p_b[m]).collect();
            let p = (0..m).map(|j| p_b[j] + xi_b[n]).collect();
            (TransportPlan::from_dense(&sol.flow, n1, m1, n, m, theta), DualPair { xi, p })
        }
        (Balance::Relaxed, Sense::Min) => {
            let inst = virtual_instance(mu, nu, theta)?;
            let (n1, m1) = (inst.mu.len(), inst.nu.len());
            let cost = dense_cost(&inst.theta, n1, m1, Sense::Min);
            let sol = solve_transport(inst.mu.weights(), inst.nu.weights(), &cost)?;
            let mut xi = sol.u.clone();
            let mut p = sol.v.clone();
            let shift = match inst.virtual_atom {
                Some(VirtualAtom { side: Side::Target, .. }) => -p[m1 - 1],
                Some(VirtualAtom { side: Side::Source, .. }) => xi[n1 - 1],
                None => -p[0],
            };
            xi.iter_mut().for_each(|x| *x -= shift);
            p.iter_mut().for_each(|y| *y += shift);
            xi.truncate(n);
            p.truncate(m);
            (TransportPlan::from_dense(&sol.flow, n1, m1, n, m, theta), DualPair { xi, p })
        }
    };
    let dual_value = duals.value(mu, nu);
    let gap = match sense {
        Sense::Max => dual_value - plan.value,
        Sense::Min => plan.value - dual_value,
    };
    Ok(KantorovichSolution { plan, duals, dual_value, gap, sense, balance })
}

/// Optimal permutation of a square payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `perm[i]` is the column matched to row `i`.
    pub perm: Vec<usize>,
    pub value: f64,
}

/// Permutation maximizing `sum theta(i, perm(i))`.
pub fn solve_assignment(theta: &[Vec<f64>]) -> Result<Assignment> {
    let n = theta.len();
    check_payoff(theta, n, n).map_err(|_| Error::Dimension("assignment needs a square finite matrix".into()))?;
    let cost: Vec<f64> = theta.iter().flat_map(|r| r.iter().map(|v| -v)).collect();
    let perm = min_cost_assignment(&cost, n);
    let value = perm.iter().enumerate().map(|(i, &j)| theta[i][j]).sum();
    Ok(Assignment { perm, value })
}

/// Outcome of a cyclical monotonicity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Monotonicity {
    Certified,
    /// Pairs `(x_l, y_l)` of the plan; reassigning each `x_l` to `y_{l+1}`
    /// raises the payoff by `gain`.
    Violation { cycle: Vec<(usize, usize)>, gain: f64 },
}

impl Monotonicity {
    pub fn is_certified(&self) -> bool {
        matches!(self, Monotonicity::Certified)
    }
}

const CYCLE_TOL: f64 = 1e-9;

/// Searches for a cycle of at most `k_max` positive-mass pairs whose
/// rotation improves the objective by more than `1e-9`.
pub fn check_cyclical_monotonicity(
    plan: &TransportPlan,
    theta: &[Vec<f64>],
    sense: Sense,
    k_max: usize,
) -> Result<Monotonicity> {
    if k_max < 2 {
        return Err(Error::InvalidInput("cycle length bound must be at least 2".into()));
    }
    let pairs: Vec<(usize, usize)> =
        plan.entries.iter().filter(|e| e.mass > 1e-12).map(|e| (e.i, e.j)).collect();
    let s = if sense == Sense::Max { 1.0 } else { -1.0 };
    let weight = |a: usize, b: usize| -> f64 {
        let (xa, ya) = pairs[a];
        let (_, yb) = pairs[b];
        s * (theta[xa][ya] - theta[xa][yb])
    };
    match negative_cycle(pairs.len(), k_max, &weight) {
        None => Ok(Monotonicity::Certified),
        Some((cycle, w)) => Ok(Monotonicity::Violation {
            cycle: cycle.iter().map(|&l| pairs[l]).collect(),
            gain: -w,
        }),
    }
}

/// Monotonicity of a permutation, viewed as a unit-mass plan.
pub fn check_permutation_monotonicity(perm: &[usize], theta: &[Vec<f64>], k_max: usize) -> Result<Monotonicity> {
    check_payoff(theta, perm.len(), perm.len())?;
    check_cyclical_monotonicity(&TransportPlan::from_permutation(perm, theta), theta, Sense::Max, k_max)
}

/// Finds a simple cycle of at most `k_max` nodes with total weight below
/// `-1e-9` in the complete digraph on `n` nodes, if any.
pub(crate) fn negative_cycle(n: usize, k_max: usize, w: &dyn Fn(usize, usize) -> f64) -> Option<(Vec<usize>, f64)> {
    if n < 2 {
        return None;
    }
    if k_max >= n {
        if let Some(c) = bellman_ford_cycle(n, w) {
            return Some(c);
        }
        return None;
    }
    bounded_cycle(n, k_max, w)
}

fn cycle_weight(c: &[usize], w: &dyn Fn(usize, usize) -> f64) -> f64 {
    (0..c.len()).map(|k| w(c[k], c[(k + 1) % c.len()])).sum()
}

fn bellman_ford_cycle(n: usize, w: &dyn Fn(usize, usize) -> f64) -> Option<(Vec<usize>, f64)> {
    let mut dist = vec![0.0f64; n];
    let mut pred = vec![usize::MAX; n];
    let mut last = usize::MAX;
    for _ in 0..n {
        last = usize::MAX;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let cand = dist[a] + w(a, b);
                if cand < dist[b] - 1e-13 {
                    dist[b] = cand;
                    pred[b] = a;
                    last = b;
                }
            }
        }
        if last == usize::MAX {
            return None;
        }
    }
    // walk back n steps to land on the cycle
    let mut v = last;
    for _ in 0..n {
        v = pred[v];
    }
    let mut cycle = vec![v];
    let mut u = pred[v];
    while u != v {
        cycle.push(u);
        u = pred[u];
    }
    cycle.reverse();
    let cw = cycle_weight(&cycle, w);
    if cw < -CYCLE_TOL {
        Some((cycle, cw))
    } else {
        // relaxations below tolerance; fall back to the exact bounded search
        bounded_cycle(n, n, w)
    }
}

fn bounded_cycle(n: usize, k_max: usize, w: &dyn Fn(usize, usize) -> f64) -> Option<(Vec<usize>, f64)> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for s in 0..n {
        // d[k][v]: lightest walk with k edges from s to v
        let mut d = vec![vec![f64::INFINITY; n]; k_max + 1];
        let mut pr = vec![vec![usize::MAX; n]; k_max + 1];
        d[0][s] = 0.0;
        for k in 1..=k_max {
            for a in 0..n {
                if !d[k - 1][a].is_finite() {
                    continue;
                }
                for b in 0..n {
                    if a == b {
                        continue;
                    }
                    let c = d[k - 1][a] + w(a, b);
                    if c < d[k][b] {
                        d[k][b] = c;
                        pr[k][b] = a;
                    }
                }
            }
            if d[k][s] < -CYCLE_TOL {
                let mut walk = Vec::with_capacity(k);
                let mut v = s;
                for kk in (1..=k).rev() {
                    v = pr[kk][v];
                    walk.push(v);
                }
                walk.reverse();
                // walk is s -> ... closed; split into simple cycles
                if let Some(c) = split_negative(&walk, w) {
                    if best.as_ref().map_or(true, |b| c.1 < b.1) {
                        best = Some(c);
                    }
                    break;
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    best
}

/// Decomposes a closed walk into simple cycles and returns the lightest
/// one if it is negative.
fn split_negative(walk: &[usize], w: &dyn Fn(usize, usize) -> f64) -> Option<(Vec<usize>, f64)> {
    let mut stack: Vec<usize> = Vec::new();
    let mut cycles: Vec<Vec<usize>> = Vec::new();
    for &v in walk.iter().chain(std::iter::once(&walk[0])) {
        if let Some(pos) = stack.iter().position(|&u| u == v) {
            let c: Vec<usize> = stack.drain(pos..).collect();
            if c.len() >= 2 {
                cycles.push(c);
            }
        }
        stack.push(v);
    }
    cycles
        .into_iter()
        .map(|c| {
            let cw = cycle_weight(&c, w);
            (c, cw)
        })
        .filter(|(_, cw)| *cw < -CYCLE_TOL)
        .min_by(|a, b| a.1.total_cmp(&b.1))
}

/// Potentials `u, v` with `u_i + v_{tau(i)} = theta(i, tau(i))` and
/// `u_i + v_j >= theta(i, j)`, from shortest paths in the exchange graph.
///
/// Rejects matchings that are not cyclically monotone.
pub fn dual_potentials_from_matching(tau: &[usize], theta: &[Vec<f64>]) -> Result<DualPair> {
    let n = tau.len();
    check_payoff(theta, n, n)?;
    check_permutation(tau)?;
    if let Monotonicity::Violation { cycle, .. } = check_permutation_monotonicity(tau, theta, n.max(2))? {
        return Err(Error::NotMonotone(cycle.iter().map(|c| c.0).collect()));
    }
    // edge i -> k with weight theta(k, tau k) - theta(i, tau k)
    let mut u = vec![0.0f64; n];
    for _ in 0..n {
        let mut changed = false;
        for i in 0..n {
            for k in 0..n {
                if i == k {
                    continue;
                }
                let c = u[i] + theta[k][tau[k]] - theta[i][tau[k]];
                if c < u[k] {
                    u[k] = c;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut v = vec![0.0; n];
    for i in 0..n {
        v[tau[i]] = theta[i][tau[i]] - u[i];
    }
    Ok(DualPair { xi: u, p: v })
}

pub(crate) fn check_permutation(tau: &[usize]) -> Result<()> {
    let n = tau.len();
    let mut seen = vec![false; n];
    for &j in tau {
        if j >= n || seen[j] {
            return Err(Error::InvalidInput(format!("{tau:?} is not a permutation")));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Convex combination of permutation matrices equal to a doubly
/// stochastic matrix.
pub fn birkhoff_decompose(b: &[Vec<f64>]) -> Result<Vec<(f64, Vec<usize>)>> {
    let n = b.len();
    check_payoff(b, n, n)?;
    for i in 0..n {
        let rs: f64 = b[i].iter().sum();
        let cs: f64 = (0..n).map(|r| b[r][i]).sum();
        if (rs - 1.0).abs() > 1e-9 || (cs - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("line {i} does not sum to one")));
        }
        if b[i].iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!("row {i} has a negative entry")));
        }
    }
    let mut r: Vec<Vec<f64>> = b.to_vec();
    let mut out = Vec::new();
    let mut used = 0.0;
    let max_terms = n * n;
    while 1.0 - used > 1e-12 && out.len() < max_terms {
        let adj: Vec<Vec<usize>> = r
            .iter()
            .map(|row| (0..n).filter(|&j| row[j] > 1e-13).collect())
            .collect();
        let Some(perm) = perfect_matching(&adj, n) else { break };
        let w = (0..n).map(|i| r[i][perm[i]]).fold(f64::INFINITY, f64::min);
        for i in 0..n {
            r[i][perm[i]] -= w;
            if r[i][perm[i]] <= 1e-13 {
                r[i][perm[i]] = 0.0;
            }
        }
        used += w;
        out.push((w, perm));
    }
    Ok(out)
}

/// Which side of a transport instance a potential lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Source,
    Target,
}

/// `p^theta(x) = max_y theta(x,y) - f(y)` for `Side::Source` (input on the
/// target side) and `f_theta(y) = max_x theta(x,y) - f(x)` for
/// `Side::Target` (input on the source side).
pub fn c_transform(f: &[f64], theta: &[Vec<f64>], to: Side) -> Vec<f64> {
    let n = theta.len();
    let m = theta.first().map_or(0, |r| r.len());
    match to {
        Side::Source => (0..n)
            .map(|x| (0..m).map(|y| theta[x][y] - f[y]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        Side::Target => (0..m)
            .map(|y| (0..n).map(|x| theta[x][y] - f[x]).fold(f64::NEG_INFINITY, f64::max))
            .collect(),
    }
}

/// Where the balancing atom was added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualAtom {
    pub side: Side,
    pub index: usize,
}

/// Balanced instance with an optional zero-payoff virtual atom.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancedInstance {
    pub mu: DiscreteMeasure,
    pub nu: DiscreteMeasure,
    pub theta: Vec<Vec<f64>>,
    pub virtual_atom: Option<VirtualAtom>,
}

impl BalancedInstance {
    /// Drops the virtual row or column from a plan of the balanced instance.
    pub fn strip(&self, plan: &TransportPlan) -> TransportPlan {
        let (mut n, mut m) = (plan.n_rows, plan.n_cols);
        match self.virtual_atom {
            Some(VirtualAtom { side: Side::Source, .. }) => n -= 1,
            Some(VirtualAtom { side: Side::Target, .. }) => m -= 1,
            None => {}
        }
        let entries: Vec<PlanEntry> = plan.entries.iter().filter(|e| e.i < n && e.j < m).cloned().collect();
        let value = entries.iter().map(|e| e.mass * self.theta[e.i][e.j]).sum();
        TransportPlan { n_rows: n, n_cols: m, entries, value }
    }
}

/// Appends an atom of mass `|mu(X) - nu(Y)|` with zero payoff to the
/// lighter side, so that solving the balanced instance and dropping the
/// virtual entries gives an optimal relaxed plan.
pub fn balance_virtual(mu: &DiscreteMeasure, nu: &DiscreteMeasure, theta: &[Vec<f64>]) -> Result<BalancedInstance> {
    check_payoff(theta, mu.len(), nu.len())?;
    if theta.iter().flatten().any(|&t| t < 0.0) {
        return Err(Error::InvalidInput("balancing needs a nonnegative payoff".into()));
    }
    virtual_instance(mu, nu, theta)
}

fn virtual_instance(mu: &DiscreteMeasure, nu: &DiscreteMeasure, theta: &[Vec<f64>]) -> Result<BalancedInstance> {
    let (a, b) = (mu.total_mass(), nu.total_mass());
    let diff = a - b;
    let mut inst = BalancedInstance {
        mu: mu.clone(),
        nu: nu.clone(),
        theta: theta.to_vec(),
        virtual_atom: None,
    };
    if diff.abs() <= 1e-12 * (1.0 + a.abs()) {
        return Ok(inst);
    }
    let zero_point = |m: &DiscreteMeasure| -> Vec<Vec<f64>> {
        let mut pts = m.points().to_vec();
        if m.dim() > 0 {
            pts.push(vec![0.0; m.dim()]);
        }
        pts
    };
    if diff > 0.0 {
        let mut w = nu.weights().to_vec();
        w.push(diff);
        inst.nu = DiscreteMeasure::new(nu.dim(), zero_point(nu), w)?;
        for row in inst.theta.iter_mut() {
            row.push(0.0);
        }
        inst.virtual_atom = Some(VirtualAtom { side: Side::Target, index: nu.len() });
    } else {
        let mut w = mu.weights().to_vec();
        w.push(-diff);
        inst.mu = DiscreteMeasure::new(mu.dim(), zero_point(mu), w)?;
        inst.theta.push(vec![0.0; nu.len()]);
        inst.virtual_atom = Some(VirtualAtom { side: Side::Source, index: mu.len() });
    }
    Ok(inst)
}

/// Kantorovich-Rubinstein distance with its Lipschitz certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDistance {
    pub value: f64,
    /// 1-Lipschitz potential on the atoms of `mu`.
    pub xi_mu: Vec<f64>,
    /// The same potential on the atoms of `nu`.
    pub xi_nu: Vec<f64>,
    /// `int xi d(mu - nu)`; equals `value` at optimality.
    pub dual_value: f64,
}

/// Transport distance under a metric, certified by a 1-Lipschitz potential.
///
/// Balanced: `min sum d pi = sup_{Lip(1)} int xi d(mu - nu)`. Unbalanced:
/// the lighter measure is transported in full; the supremum runs over
/// `xi <= 0` when `mu(X) > nu(X)` and over `xi >= 0` otherwise.
pub fn monge_metric_distance(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    balance: Balance,
    metric: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<MetricDistance> {
    let (n, m) = (mu.len(), nu.len());
    let dist = |a: &[f64], b: &[f64]| -> Result<f64> {
        let d = metric(a, b);
        if !(d >= 0.0) {
            return Err(Error::InvalidInput(format!("metric returned {d}")));
        }
        Ok(d)
    };
    let mut d = vec![vec![0.0; m]; n];
    for (x, row) in d.iter_mut().enumerate() {
        for (y, v) in row.iter_mut().enumerate() {
            *v = dist(mu.point(x), nu.point(y))?;
        }
    }
    if balance == Balance::Balanced {
        balanced_masses(mu, nu)?;
    }
    if n == 0 || m == 0 {
        return Ok(MetricDistance { value: 0.0, xi_mu: vec![0.0; n], xi_nu: vec![0.0; m], dual_value: 0.0 });
    }
    let sol = solve_kantorovich(mu, nu, &d, Sense::Min, Balance::Relaxed)?;
    let (a, b) = (&sol.duals.xi, &sol.duals.p);
    let target_side = mu.total_mass() >= nu.total_mass() - 1e-12;
    let mut xi_mu = vec![0.0; n];
    let mut xi_nu = vec![0.0; m];
    if target_side {
        // -min_x d(x, z) - a(x)
        let eval = |z: &[f64]| -> Result<f64> {
            let mut best = f64::INFINITY;
            for x in 0..n {
                best = best.min(dist(mu.point(x), z)? - a[x]);
            }
            Ok(-best)
        };
        for x in 0..n {
            xi_mu[x] = eval(mu.point(x))?;
        }
        for y in 0..m {
            xi_nu[y] = eval(nu.point(y))?;
        }
    } else {
        // min_y d(z, y) - b(y)
        let eval = |z: &[f64]| -> Result<f64> {
            let mut best = f64::INFINITY;
            for y in 0..m {
                best = best.min(dist(z, nu.point(y))? - b[y]);
            }
            Ok(best)
        };
        for x in 0..n {
            xi_mu[x] = eval(mu.point(x))?;
        }
        for y in 0..m {
            xi_nu[y] = eval(nu.point(y))?;
        }
    }
    let dual_value = mu.integrate(&xi_mu) - nu.integrate(&xi_nu);
    Ok(MetricDistance { value: sol.plan.value, xi_mu, xi_nu, dual_value })
}

/// Euclidean distance.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    crate::measures::sq_dist(a, b).sqrt()
}
