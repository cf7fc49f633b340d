//! Capacity constrained partitions of a discrete measure among `N` agents.
//!
//! Agent `i` charges price `p_i`; the client at `x` picks the agent
//! maximizing `theta_i(x) - p_i`, or nobody when every surplus is negative.
//! Optimal partitions are obtained from minimizers of the convex dual
//!
//! * `Xi+(p) + [p]_+ . m` when capacities are upper bounds,
//! * `Xi+(p) + p . m` for exact capacities below the total mass,
//! * `Xi(p) + p . m` (no outside option, gauge `sum p = 0`) for exact
//!   capacities summing to the total mass,
//!
//! where `Xi+(p) = sum_x w(x) max_i [theta_i(x) - p_i]_+`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::solve_transport;
use crate::measures::{
    check_increasing, regime_of, CapacityMode, CapacitySpec, DiscreteMeasure, FieldValues, PartitionLabeling,
    Regime, WeakPartition,
};
use crate::smooth::{self, Extras, OptionField};

fn check_field(theta: &FieldValues, mu: &DiscreteMeasure, n: usize) -> Result<()> {
    if theta.n_atoms() != mu.len() {
        return Err(Error::Dimension(format!("field has {} atoms, measure {}", theta.n_atoms(), mu.len())));
    }
    if theta.n_agents() != n {
        return Err(Error::Dimension(format!("field has {} agents, expected {n}", theta.n_agents())));
    }
    Ok(())
}

/// Best option at one atom: `(label, surplus)`, label 0 when opting out wins
/// (ties go to the lowest label).
fn best_option(theta: &[f64], p: &[f64], opt_out: bool) -> (usize, f64) {
    let (mut lab, mut best) = if opt_out { (0, 0.0) } else { (1, theta[0] - p[0]) };
    for i in 0..theta.len() {
        let v = theta[i] - p[i];
        if v > best {
            best = v;
            lab = i + 1;
        }
    }
    (lab, best)
}

fn xi_impl(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure, opt_out: bool) -> (f64, Vec<f64>) {
    let n = theta.n_agents();
    let mut v = 0.0;
    let mut g = vec![0.0; n];
    for (x, &w) in mu.weights().iter().enumerate() {
        let (lab, s) = best_option(theta.at(x), p, opt_out);
        v += w * s;
        if lab > 0 {
            g[lab - 1] -= w;
        }
    }
    (v, g)
}

/// `Xi+(p)` and the subgradient `-mu(A_i(p))`.
pub fn xi_plus(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure) -> Result<(f64, Vec<f64>)> {
    check_field(theta, mu, p.len())?;
    Ok(xi_impl(p, theta, mu, true))
}

/// `Xi(p) = sum_x w(x) max_i theta_i(x) - p_i`, without the outside option.
pub fn xi_saturated(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure) -> Result<(f64, Vec<f64>)> {
    check_field(theta, mu, p.len())?;
    if p.is_empty() {
        return Err(Error::InvalidInput("no agents".into()));
    }
    Ok(xi_impl(p, theta, mu, false))
}

/// Soft-max regularization of `Xi+` with its exact gradient.
///
/// The value lies in `[Xi+(p), Xi+(p) + eps ln(N + 1) mu(X)]`.
pub fn smoothed_xi(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure, eps: f64) -> Result<(f64, Vec<f64>)> {
    check_field(theta, mu, p.len())?;
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("smoothing parameter {eps} must be positive")));
    }
    let field = OptionField::scalar(mu.weights().to_vec(), theta.raw().to_vec(), p.len(), true);
    let neg: Vec<f64> = p.iter().map(|v| -v).collect();
    let (v, g, _) = smooth::evaluate(&field, &Extras::default(), &neg, eps, false);
    Ok((v, g.iter().map(|x| -x).collect()))
}

/// Client choices at prices `p`: the best agent if its surplus is positive,
/// else 0. Ties go to the lowest index.
pub fn extract_partition(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure) -> Result<PartitionLabeling> {
    check_field(theta, mu, p.len())?;
    let labels = (0..mu.len()).map(|x| best_option(theta.at(x), p, true).0).collect();
    PartitionLabeling::new(p.len(), labels)
}

/// `V_i = sum_{label = i} w(x) theta_i(x)`.
pub fn individual_values(labeling: &PartitionLabeling, theta: &FieldValues, mu: &DiscreteMeasure) -> Result<Vec<f64>> {
    check_field(theta, mu, labeling.n_agents)?;
    if labeling.len() != mu.len() {
        return Err(Error::Dimension("labeling and measure differ in length".into()));
    }
    let mut v = vec![0.0; labeling.n_agents];
    for (x, (&l, &w)) in labeling.labels.iter().zip(mu.weights()).enumerate() {
        if l > 0 {
            v[l - 1] += w * theta.get(l - 1, x);
        }
    }
    Ok(v)
}

/// Which dual is minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    AtMost,
    ExactUnder,
    ExactSaturated,
}

impl Formulation {
    fn opt_out(self) -> bool {
        self != Formulation::ExactSaturated
    }
}

/// Optimal partition with its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SDResult {
    pub prices: Vec<f64>,
    pub labeling: PartitionLabeling,
    /// Exact optimal allocation; at most a few boundary atoms are split.
    pub weak: WeakPartition,
    /// Agent masses of the weak allocation.
    pub masses: Vec<f64>,
    /// Individual values of the weak allocation.
    pub values: Vec<f64>,
    pub dual_value: f64,
    pub primal_value: f64,
    pub gap: f64,
    pub regime: Regime,
    pub formulation: Formulation,
    pub newton_iterations: usize,
    /// Number of atoms handed to the exact transport polish.
    pub polished_atoms: usize,
}

/// Hard dual objective of a formulation.
pub fn dual_objective(p: &[f64], theta: &FieldValues, mu: &DiscreteMeasure, m: &[f64], form: Formulation) -> f64 {
    let (xi, _) = xi_impl(p, theta, mu, form.opt_out());
    let lin: f64 = match form {
        Formulation::AtMost => p.iter().zip(m).map(|(a, b)| a.max(0.0) * b).sum(),
        _ => p.iter().zip(m).map(|(a, b)| a * b).sum(),
    };
    xi + lin
}

/// Minimizes the dual in the prices and recovers an optimal partition.
///
/// The smoothed dual is minimized by damped Newton steps along
/// `eps = s 10^-k`, `k = 1..6`, with `s = max |theta|`. Atoms whose two best
/// options are within a tolerance of each other are then reallocated by an
/// exact transport problem whose duals give the final prices; the tolerance
/// grows until every other atom is consistent with them.
pub fn solve_prices(
    mu: &DiscreteMeasure,
    theta: &FieldValues,
    m: &CapacitySpec,
    regime: Option<Regime>,
) -> Result<SDResult> {
    let n = m.len();
    if mu.is_empty() {
        return Err(Error::InvalidInput("empty support".into()));
    }
    if n == 0 {
        return Err(Error::InvalidInput("no agents".into()));
    }
    check_field(theta, mu, n)?;
    let actual = regime_of(m.total(), mu.total_mass());
    if let Some(r) = regime {
        if r != actual {
            return Err(Error::InvalidInput(format!("regime {r:?} given but capacities are {actual:?}")));
        }
    }
    let form = match (m.mode, actual) {
        (CapacityMode::AtMost, _) => Formulation::AtMost,
        (CapacityMode::Exact, Regime::US) => Formulation::ExactUnder,
        (CapacityMode::Exact, Regime::S) => Formulation::ExactSaturated,
        (CapacityMode::Exact, Regime::OS) => {
            return Err(Error::Infeasible(format!(
                "exact capacities {} exceed the total mass {}",
                m.total(),
                mu.total_mass()
            )))
        }
    };
    let active: Vec<usize> = (0..n).filter(|&i| m.m[i] > 0.0).collect();
    let sub = theta.agents(&active);
    let m_act: Vec<f64> = active.iter().map(|&i| m.m[i]).collect();
    let scale = theta.max_abs().max(1e-300);

    let (p_act, iterations) = if active.is_empty() {
        (Vec::new(), 0)
    } else {
        let field = OptionField::scalar(mu.weights().to_vec(), sub.raw().to_vec(), active.len(), form.opt_out());
        let extras = match form {
            Formulation::AtMost => Extras { plus: Some(m_act.clone()), ..Default::default() },
            Formulation::ExactUnder => Extras { linear: m_act.clone(), ..Default::default() },
            Formulation::ExactSaturated => Extras { linear: m_act.clone(), gauge: true, ..Default::default() },
        };
        let schedule: Vec<f64> = (1..=6).map(|k| scale * 10f64.powi(-k)).collect();
        let rep = smooth::homotopy(&field, &extras, &vec![0.0; active.len()], &schedule, 1e-12 * mu.total_mass(), 200)?;
        (rep.p.iter().map(|v| -v).collect::<Vec<f64>>(), rep.iterations)
    };

    let (p_act, gamma_act, polished) = if active.is_empty() {
        (Vec::new(), vec![Vec::new(); mu.len()], 0)
    } else {
        polish(mu, &sub, &m_act, form, &p_act, scale * 3e-5)?
    };

    // prices of agents without capacity: nobody strictly prefers them
    let mut prices = vec![0.0; n];
    for (k, &i) in active.iter().enumerate() {
        prices[i] = p_act[k];
    }
    for i in (0..n).filter(|i| !active.contains(i)) {
        let mut pi = f64::NEG_INFINITY;
        for x in 0..mu.len() {
            let (_, other) = best_option(sub.at(x), &p_act, form.opt_out() || active.is_empty());
            pi = pi.max(theta.get(i, x) - other);
        }
        prices[i] = if form == Formulation::AtMost { pi.max(0.0) } else { pi };
    }
    let mut gamma = vec![vec![0.0; n]; mu.len()];
    for (x, row) in gamma_act.iter().enumerate() {
        for (k, &i) in active.iter().enumerate() {
            gamma[x][i] = row[k];
        }
    }
    let weak = WeakPartition { n_agents: n, gamma };
    let labeling = round_weak(&weak, mu);
    let masses = weak.masses(mu);
    let values = weak.values(mu, theta);
    let primal_value: f64 = values.iter().sum();
    let dual_value = dual_objective(&prices, theta, mu, &m.m, form);
    Ok(SDResult {
        prices,
        labeling,
        weak,
        masses,
        values,
        dual_value,
        primal_value,
        gap: dual_value - primal_value,
        regime: actual,
        formulation: form,
        newton_iterations: iterations,
        polished_atoms: polished,
    })
}

/// Exact reallocation of near-tied atoms. Returns prices, the allocation
/// (rows of active-agent shares) and the number of atoms reallocated.
fn polish(
    mu: &DiscreteMeasure,
    theta: &FieldValues,
    m: &[f64],
    form: Formulation,
    p_smooth: &[f64],
    tau0: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, usize)> {
    let n = m.len();
    let k = mu.len();
    let opt = form.opt_out();
    let spread = {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for x in 0..k {
            for i in 0..n {
                let v = theta.get(i, x) - p_smooth[i];
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if opt {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        (hi - lo).max(0.0)
    };
    let scale = theta.max_abs().max(1e-300);
    let slack = 1e-11 * (1.0 + scale);
    let mut tau = tau0;
    loop {
        let full = tau > 2.0 * spread + scale;
        let mut fixed = vec![usize::MAX; k];
        let mut amb = Vec::new();
        for x in 0..k {
            let th = theta.at(x);
            let mut vals: Vec<f64> = (0..n).map(|i| th[i] - p_smooth[i]).collect();
            if opt {
                vals.push(0.0);
            }
            let (lab, best) = best_option(th, p_smooth, opt);
            let second = vals
                .iter()
                .enumerate()
                .filter(|(o, _)| if opt { (*o + 1) % (n + 1) != lab } else { *o + 1 != lab })
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if full || best - second <= tau {
                amb.push(x);
            } else {
                fixed[x] = lab;
            }
        }
        if let Some(res) = try_polish(mu, theta, m, form, p_smooth, &fixed, &amb, slack)? {
            return Ok((res.0, res.1, amb.len()));
        }
        if full {
            return Err(Error::NoConvergence { iterations: 0, residual: f64::NAN });
        }
        tau *= 10.0;
    }
}

#[allow(clippy::too_many_arguments)]
fn try_polish(
    mu: &DiscreteMeasure,
    theta: &FieldValues,
    m: &[f64],
    form: Formulation,
    p_smooth: &[f64],
    fixed: &[usize],
    amb: &[usize],
    slack: f64,
) -> Result<Option<(Vec<f64>, Vec<Vec<f64>>)>> {
    let n = m.len();
    let w = mu.weights();
    let total = mu.total_mass();
    let mtol = 1e-12 * (1.0 + total);
    let mut r = m.to_vec();
    for (x, &l) in fixed.iter().enumerate() {
        if l != usize::MAX && l > 0 {
            r[l - 1] -= w[x];
        }
    }
    if r.iter().any(|&v| v < -mtol) {
        return Ok(None);
    }
    r.iter_mut().for_each(|v| *v = v.max(0.0));
    let wa: f64 = amb.iter().map(|&x| w[x]).sum();
    let rs: f64 = r.iter().sum();
    let mut flows = vec![vec![0.0; n]; amb.len()];
    let prices: Vec<f64>;
    if amb.is_empty() {
        match form {
            Formulation::ExactSaturated | Formulation::ExactUnder => {
                if rs > mtol {
                    return Ok(None);
                }
                prices = p_smooth.to_vec();
            }
            Formulation::AtMost => {
                prices = p_smooth.iter().zip(&r).map(|(&p, &ri)| if ri > mtol { 0.0 } else { p.max(0.0) }).collect();
            }
        }
    } else {
        // sources: ambiguous atoms [+ virtual]; sinks: agents [+ opt-out]
        let mut a: Vec<f64> = amb.iter().map(|&x| w[x]).collect();
        let mut b = r.clone();
        match form {
            Formulation::ExactSaturated => {
                if (rs - wa).abs() > 1e-9 * (1.0 + wa) {
                    return Ok(None);
                }
            }
            Formulation::ExactUnder => {
                if rs > wa + mtol {
                    return Ok(None);
                }
                b.push((wa - rs).max(0.0));
            }
            Formulation::AtMost => {
                b.push(wa);
                a.push(rs);
            }
        }
        let (rows, cols) = (a.len(), b.len());
        let mut cost = vec![0.0; rows * cols];
        for (q, &x) in amb.iter().enumerate() {
            for i in 0..n {
                cost[q * cols + i] = -theta.get(i, x);
            }
        }
        let sol = solve_transport(&a, &b, &cost)?;
        let big_p: Vec<f64> = sol.v.iter().map(|v| -v).collect();
        prices = match form {
            Formulation::ExactSaturated => {
                let mean = big_p.iter().sum::<f64>() / n as f64;
                big_p.iter().map(|v| v - mean).collect()
            }
            Formulation::ExactUnder => (0..n).map(|i| big_p[i] - big_p[n]).collect(),
            Formulation::AtMost => (0..n).map(|i| (big_p[i] - big_p[n]).max(0.0)).collect(),
        };
        for q in 0..amb.len() {
            for i in 0..n {
                flows[q][i] = sol.flow[q * cols + i] / a[q];
            }
        }
    }
    // fixed atoms must stay optimal
    let opt = form.opt_out();
    for (x, &l) in fixed.iter().enumerate() {
        if l == usize::MAX {
            continue;
        }
        let th = theta.at(x);
        let (_, best) = best_option(th, &prices, opt);
        let own = if l == 0 { 0.0 } else { th[l - 1] - prices[l - 1] };
        if own < best - slack {
            return Ok(None);
        }
    }
    let mut gamma = vec![vec![0.0; n]; mu.len()];
    for (x, &l) in fixed.iter().enumerate() {
        if l != usize::MAX && l > 0 {
            gamma[x][l - 1] = 1.0;
        }
    }
    for (q, &x) in amb.iter().enumerate() {
        let s: f64 = flows[q].iter().sum();
        let norm = if s > 1.0 { s } else { 1.0 };
        for i in 0..n {
            gamma[x][i] = flows[q][i] / norm;
        }
    }
    Ok(Some((prices, gamma)))
}

/// Rounds a weak partition to a labeling; each split atom goes to the
/// option furthest below its weak mass.
pub fn round_weak(weak: &WeakPartition, mu: &DiscreteMeasure) -> PartitionLabeling {
    let n = weak.n_agents;
    let w = mu.weights();
    let mut target = vec![0.0; n + 1];
    for (x, row) in weak.gamma.iter().enumerate() {
        let s: f64 = row.iter().sum();
        target[0] += w[x] * (1.0 - s).max(0.0);
        for i in 0..n {
            target[i + 1] += w[x] * row[i];
        }
    }
    let mut got = vec![0.0; n + 1];
    let mut labels = vec![0usize; weak.gamma.len()];
    let mut split = Vec::new();
    for (x, row) in weak.gamma.iter().enumerate() {
        let s: f64 = row.iter().sum();
        let mut shares = vec![(1.0 - s).max(0.0)];
        shares.extend_from_slice(row);
        let top = shares.iter().cloned().fold(0.0, f64::max);
        if top >= 1.0 - 1e-12 {
            let lab = shares.iter().position(|&v| v == top).unwrap();
            labels[x] = lab;
            got[lab] += w[x];
        } else {
            split.push((x, shares));
        }
    }
    for (x, shares) in split {
        let lab = (0..=n)
            .filter(|&o| shares[o] > 0.0)
            .max_by(|&a, &b| (target[a] - got[a]).total_cmp(&(target[b] - got[b])).then(b.cmp(&a)))
            .unwrap_or(0);
        labels[x] = lab;
        got[lab] += w[x];
    }
    PartitionLabeling { n_agents: n, labels }
}

/// Value and price of a single agent serving mass `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SingleAgent {
    pub value: f64,
    pub price: f64,
}

/// Serves the atoms with the largest `theta` first until mass `m` is
/// reached (splitting the marginal atom). The price is `theta` at the
/// marginal atom, the derivative of the value in `m`.
pub fn single_agent_value(theta: &[f64], mu: &DiscreteMeasure, m: f64) -> Result<SingleAgent> {
    if theta.len() != mu.len() {
        return Err(Error::Dimension(format!("{} utilities for {} atoms", theta.len(), mu.len())));
    }
    let total = mu.total_mass();
    if !(m >= 0.0) || m > total * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::InvalidInput(format!("mass {m} outside [0, {total}]")));
    }
    let mut order: Vec<usize> = (0..theta.len()).collect();
    order.sort_by(|&a, &b| theta[b].total_cmp(&theta[a]).then(a.cmp(&b)));
    let w = mu.weights();
    let mut left = m;
    let mut value = 0.0;
    let mut price = order.first().map_or(0.0, |&x| theta[x]);
    for &x in &order {
        if left <= 0.0 {
            break;
        }
        let take = w[x].min(left);
        value += take * theta[x];
        left -= take;
        price = theta[x];
    }
    Ok(SingleAgent { value, price })
}

/// Individual values of the scaled family `lambda_i theta` from the single
/// agent curve `F`: `V_i = lambda_i (F(M_i) - F(M_{i+1}))` with
/// `M_i = m_i + ... + m_N`.
pub fn scaled_family_values(lambda: &[f64], base: &[f64], mu: &DiscreteMeasure, m: &[f64]) -> Result<Vec<f64>> {
    check_increasing(lambda)?;
    if lambda.len() != m.len() {
        return Err(Error::Dimension(format!("{} scales for {} capacities", lambda.len(), m.len())));
    }
    let n = m.len();
    let mut tail = vec![0.0; n + 1];
    for i in (0..n).rev() {
        tail[i] = tail[i + 1] + m[i];
    }
    let f: Vec<f64> = tail
        .iter()
        .map(|&mm| single_agent_value(base, mu, mm.min(mu.total_mass())).map(|s| s.value))
        .collect::<Result<_>>()?;
    if tail[0] > mu.total_mass() * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::InvalidInput(format!("total capacity {} exceeds the mass", tail[0])));
    }
    Ok((0..n).map(|i| lambda[i] * (f[i] - f[i + 1])).collect())
}

/// Profits at given prices and commissions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profits {
    pub labeling: PartitionLabeling,
    pub masses: Vec<f64>,
    pub values: Vec<f64>,
    pub profits: Vec<f64>,
}

/// `P_i = p_i m_i + q_i V_i`, where clients choose by the effective
/// utilities `(1 - q_i) theta_i - p_i`.
pub fn profits(p: &[f64], q: &[f64], theta: &FieldValues, mu: &DiscreteMeasure) -> Result<Profits> {
    let n = p.len();
    check_field(theta, mu, n)?;
    if q.len() != n {
        return Err(Error::Dimension(format!("{} commissions for {n} agents", q.len())));
    }
    if let Some(bad) = q.iter().find(|&&v| !(0.0..1.0).contains(&v)) {
        return Err(Error::InvalidInput(format!("commission {bad} outside [0, 1)")));
    }
    let labels: Vec<usize> = (0..mu.len())
        .map(|x| {
            let eff: Vec<f64> = (0..n).map(|i| (1.0 - q[i]) * theta.get(i, x)).collect();
            best_option(&eff, p, true).0
        })
        .collect();
    let labeling = PartitionLabeling::new(n, labels)?;
    let masses = labeling.agent_masses(mu);
    let values = individual_values(&labeling, theta, mu)?;
    let profits = (0..n).map(|i| p[i] * masses[i] + q[i] * values[i]).collect();
    Ok(Profits { labeling, masses, values, profits })
}

/// Long-run behaviour of the price flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Diagnosis {
    Converged { prices: Vec<f64> },
    Escalating { direction: Vec<f64> },
    Running { speed: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub trajectory: Vec<Vec<f64>>,
    /// `Xi+(p) + p . m` along the trajectory; non-increasing.
    pub lyapunov: Vec<f64>,
    pub max_increase: f64,
    pub diagnosis: Diagnosis,
}

/// Classifies the end of a trajectory: converged when the last step moved
/// less than `1e-9 (1 + |p|)`, escalating when `|p|` exceeds `threshold`
/// and the direction of `p` agrees with the one halfway through to
/// `1 - 1e-3` in cosine.
pub fn diagnose(trajectory: &[Vec<f64>], dt: f64, threshold: f64) -> Diagnosis {
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let last = trajectory.last().expect("trajectory holds the start");
    let k = trajectory.len();
    let speed = if k >= 2 {
        let prev = &trajectory[k - 2];
        last.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / dt
    } else {
        0.0
    };
    if speed * dt <= 1e-9 * (1.0 + norm(last)) {
        return Diagnosis::Converged { prices: last.clone() };
    }
    let mid = &trajectory[k / 2];
    let (nl, nm) = (norm(last), norm(mid));
    if nl > threshold && nm > 0.0 {
        let cos: f64 = last.iter().zip(mid).map(|(a, b)| a * b).sum::<f64>() / (nl * nm);
        if cos >= 1.0 - 1e-3 {
            return Diagnosis::Escalating { direction: last.iter().map(|v| v / nl).collect() };
        }
    }
    Diagnosis::Running { speed }
}

/// Implicit Euler discretization of `dp/dt = mu(A(p)) - m`: demand above
/// capacity raises the price. Each step minimizes
/// `Xi+(p) + p . m + |p - p_k|^2 / (2 dt)` by the smoothed Newton method.
pub fn price_dynamics(
    p0: &[f64],
    mu: &DiscreteMeasure,
    theta: &FieldValues,
    m: &[f64],
    dt: f64,
    steps: usize,
    threshold: f64,
) -> Result<Dynamics> {
    let n = p0.len();
    check_field(theta, mu, n)?;
    if m.len() != n {
        return Err(Error::Dimension(format!("{} capacities for {n} agents", m.len())));
    }
    let field = OptionField::scalar(mu.weights().to_vec(), theta.raw().to_vec(), n, true);
    let start: Vec<f64> = p0.iter().map(|v| -v).collect();
    let flow = smooth::prox_flow(&field, m, &start, dt, steps)?;
    let trajectory: Vec<Vec<f64>> = flow.trajectory.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
    let diagnosis = diagnose(&trajectory, dt, threshold);
    Ok(Dynamics { trajectory, lyapunov: flow.lyapunov, max_increase: flow.max_increase, diagnosis })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> DiscreteMeasure {
        let xs: Vec<f64> = (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect();
        DiscreteMeasure::on_line(&xs, vec![1.0 / n as f64; n]).unwrap()
    }

    fn two_sided(mu: &DiscreteMeasure) -> FieldValues {
        let xs = mu.xs();
        FieldValues::from_rows(&[xs.clone(), xs.iter().map(|x| 1.0 - x).collect()]).unwrap()
    }

    #[test]
    fn one_agent_constant_utility() {
        let mu = grid(4);
        let th = FieldValues::from_rows(&[vec![2.0; 4]]).unwrap();
        let (v, g) = xi_plus(&[0.5], &th, &mu).unwrap();
        assert!((v - 1.5).abs() < 1e-15);
        assert!((g[0] + 1.0).abs() < 1e-15);
        let (v, _) = xi_plus(&[1e9], &th, &mu).unwrap();
        assert_eq!(v, 0.0);
        let (s, _) = smoothed_xi(&[0.5], &th, &mu, 0.1).unwrap();
        assert!((s - 0.1 * (1.0 + (15f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn symmetric_split() {
        let mu = grid(100);
        let th = two_sided(&mu);
        let m = CapacitySpec::exact(vec![0.5, 0.5]).unwrap();
        let r = solve_prices(&mu, &th, &m, None).unwrap();
        assert_eq!(r.regime, Regime::S);
        assert!((r.prices[0] - r.prices[1]).abs() < 1e-9);
        assert!(r.prices.iter().sum::<f64>().abs() < 1e-12);
        for (x, &l) in r.labeling.labels.iter().enumerate() {
            assert_eq!(l, if x < 50 { 2 } else { 1 });
        }
        assert!(r.gap.abs() < 1e-9);
        let v = individual_values(&r.labeling, &th, &mu).unwrap();
        assert!((v[0] - 0.375).abs() < 1e-4 && (v[1] - 0.375).abs() < 1e-4);
    }

    #[test]
    fn single_agent_threshold() {
        let mu = grid(1000);
        let th: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let s = single_agent_value(&th, &mu, 0.5).unwrap();
        assert!((s.value - 0.375).abs() < 1e-6);
        assert!((s.price - 0.5).abs() < 1e-3);
        let field = FieldValues::from_rows(&[th.clone()]).unwrap();
        let r = solve_prices(&mu, &field, &CapacitySpec::at_most(vec![0.5]).unwrap(), None).unwrap();
        assert!((r.prices[0] - 0.5).abs() < 1e-3);
        assert!((r.masses[0] - 0.5).abs() < 1e-9);
        assert!(r.gap.abs() < 1e-9);
        assert!(single_agent_value(&th, &mu, 1.5).is_err());
    }

    #[test]
    fn extraction_edge_cases() {
        let mu = grid(5);
        let th = FieldValues::from_rows(&[vec![1.0; 5], vec![0.5; 5]]).unwrap();
        assert_eq!(extract_partition(&[0.0, 0.0], &th, &mu).unwrap().labels, vec![1; 5]);
        assert_eq!(extract_partition(&[9.0, 9.0], &th, &mu).unwrap().labels, vec![0; 5]);
    }

    #[test]
    fn scaled_family_small_cases() {
        let mu = grid(1000);
        let base: Vec<f64> = mu.xs().iter().map(|x| 1.0 - x).collect();
        let f = |m: f64| single_agent_value(&base, &mu, m).unwrap().value;
        let v = scaled_family_values(&[1.0, 2.0], &base, &mu, &[0.3, 0.3]).unwrap();
        assert!((v[1] - 2.0 * f(0.3)).abs() < 1e-12);
        assert!((v[0] - (f(0.6) - f(0.3))).abs() < 1e-12);
        let z = scaled_family_values(&[1.0, 2.0], &base, &mu, &[0.0, 0.3]).unwrap();
        assert_eq!(z[0], 0.0);
        assert!(scaled_family_values(&[2.0, 1.0], &base, &mu, &[0.3, 0.3]).is_err());
    }

    #[test]
    fn zero_commission_profit() {
        let mu = grid(10);
        let th = two_sided(&mu);
        let r = profits(&[0.1, 0.2], &[0.0, 0.0], &th, &mu).unwrap();
        for i in 0..2 {
            assert!((r.profits[i] - [0.1, 0.2][i] * r.masses[i]).abs() < 1e-15);
        }
        assert!(profits(&[0.0, 0.0], &[1.0, 0.0], &th, &mu).is_err());
    }

    #[test]
    fn dynamics_from_equilibrium_is_stationary() {
        let mu = grid(40);
        let th = two_sided(&mu);
        let m = CapacitySpec::exact(vec![0.3, 0.3]).unwrap();
        let r = solve_prices(&mu, &th, &m, None).unwrap();
        let d = price_dynamics(&r.prices, &mu, &th, &m.m, 0.5, 5, 1e6).unwrap();
        assert!(d.max_increase <= 1e-10);
        let last = d.trajectory.last().unwrap();
        for (a, b) in last.iter().zip(&r.prices) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
