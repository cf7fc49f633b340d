//! Stable marriages and many-to-few stable partitions.
//!
//! A matching is a vector `tau` with `tau[man] = woman`. Quantified
//! preferences are matrices indexed `[man][woman]` for both sides.

use serde::{Deserialize, Serialize};

use crate::discrete_ot::check_permutation;
use crate::error::{Error, Result};
use crate::measures::{CapacitySpec, DiscreteMeasure, PartitionLabeling};

/// Strict rankings, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceProfile {
    pub men: Vec<Vec<usize>>,
    pub women: Vec<Vec<usize>>,
}

impl PreferenceProfile {
    pub fn new(men: Vec<Vec<usize>>, women: Vec<Vec<usize>>) -> Result<Self> {
        let p = PreferenceProfile { men, women };
        p.validate()?;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.men.len()
    }

    pub fn is_empty(&self) -> bool {
        self.men.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.men.len();
        if self.women.len() != n {
            return Err(Error::Dimension(format!("{n} men but {} women", self.women.len())));
        }
        for (side, lists) in [("man", &self.men), ("woman", &self.women)] {
            for (k, l) in lists.iter().enumerate() {
                if l.len() != n || check_permutation(l).is_err() {
                    return Err(Error::InvalidInput(format!("ranking of {side} {k} is not a permutation of 0..{n}")));
                }
            }
        }
        Ok(())
    }

    /// `rank[a][b]`: position of `b` in the list of `a` (0 = best).
    fn ranks(lists: &[Vec<usize>]) -> Vec<Vec<usize>> {
        lists
            .iter()
            .map(|l| {
                let mut r = vec![0; l.len()];
                for (pos, &b) in l.iter().enumerate() {
                    r[b] = pos;
                }
                r
            })
            .collect()
    }
}

/// Cardinal utilities `theta_m[man][woman]`, `theta_w[man][woman]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantifiedPrefs {
    pub theta_m: Vec<Vec<f64>>,
    pub theta_w: Vec<Vec<f64>>,
}

impl QuantifiedPrefs {
    pub fn new(theta_m: Vec<Vec<f64>>, theta_w: Vec<Vec<f64>>) -> Result<Self> {
        let n = theta_m.len();
        for t in [&theta_m, &theta_w] {
            crate::discrete_ot::check_payoff(t, n, n)?;
        }
        Ok(QuantifiedPrefs { theta_m, theta_w })
    }

    pub fn len(&self) -> usize {
        self.theta_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta_m.is_empty()
    }

    /// Ordinal profile; rejects ties.
    pub fn to_profile(&self) -> Result<PreferenceProfile> {
        let n = self.len();
        let rank = |vals: Vec<f64>, who: String| -> Result<Vec<usize>> {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
            if idx.windows(2).any(|w| vals[w[0]] == vals[w[1]]) {
                return Err(Error::Ties(format!("{who} has tied utilities")));
            }
            Ok(idx)
        };
        let men = (0..n)
            .map(|i| rank(self.theta_m[i].clone(), format!("man {i}")))
            .collect::<Result<Vec<_>>>()?;
        let women = (0..n)
            .map(|j| rank((0..n).map(|i| self.theta_w[i][j]).collect(), format!("woman {j}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(PreferenceProfile { men, women })
    }

    /// `theta_m + theta_w`.
    pub fn total(&self) -> Vec<Vec<f64>> {
        self.theta_m
            .iter()
            .zip(&self.theta_w)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Proposing {
    #[default]
    Men,
    Women,
}

/// Deferred acceptance. Returns `tau[man] = woman`.
pub fn gale_shapley(prefs: &PreferenceProfile, proposing: Proposing) -> Result<Vec<usize>> {
    prefs.validate()?;
    let (prop, recv) = match proposing {
        Proposing::Men => (&prefs.men, &prefs.women),
        Proposing::Women => (&prefs.women, &prefs.men),
    };
    let n = prop.len();
    let rank = PreferenceProfile::ranks(recv);
    let mut next = vec![0usize; n];
    let mut holder: Vec<Option<usize>> = vec![None; n];
    let mut free: Vec<usize> = (0..n).rev().collect();
    let mut proposals = 0usize;
    while let Some(a) = free.pop() {
        let b = prop[a][next[a]];
        next[a] += 1;
        proposals += 1;
        debug_assert!(proposals <= n * n);
        match holder[b] {
            None => holder[b] = Some(a),
            Some(c) if rank[b][a] < rank[b][c] => {
                holder[b] = Some(a);
                free.push(c);
            }
            Some(_) => free.push(a),
        }
    }
    let mut partner = vec![0; n];
    for (b, a) in holder.iter().enumerate() {
        partner[a.expect("every receiver holds a proposal")] = b;
    }
    Ok(match proposing {
        Proposing::Men => partner,
        Proposing::Women => invert(&partner),
    })
}

fn invert(tau: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; tau.len()];
    for (i, &j) in tau.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Pairs `(man, woman)` who both prefer each other to their partners.
pub fn find_blocking_pairs(tau: &[usize], prefs: &PreferenceProfile) -> Result<Vec<(usize, usize)>> {
    prefs.validate()?;
    let n = prefs.len();
    if tau.len() != n {
        return Err(Error::Dimension(format!("matching of size {} for {n} couples", tau.len())));
    }
    check_permutation(tau)?;
    let rm = PreferenceProfile::ranks(&prefs.men);
    let rw = PreferenceProfile::ranks(&prefs.women);
    let husband = invert(tau);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j != tau[i] && rm[i][j] < rm[i][tau[i]] && rw[j][i] < rw[j][husband[j]] {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Blocking pairs under cardinal utilities, with strict improvement on
/// both sides.
pub fn find_blocking_pairs_quantified(tau: &[usize], prefs: &QuantifiedPrefs) -> Result<Vec<(usize, usize)>> {
    let n = prefs.len();
    if tau.len() != n {
        return Err(Error::Dimension(format!("matching of size {} for {n} couples", tau.len())));
    }
    check_permutation(tau)?;
    let husband = invert(tau);
    let (tm, tw) = (&prefs.theta_m, &prefs.theta_w);
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j != tau[i] && tm[i][j] > tm[i][tau[i]] && tw[i][j] > tw[husband[j]][j] {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// `[x]_p = [x]_+ - p [x]_-`.
pub fn p_part(x: f64, p: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        p * x
    }
}

/// Utility of moving man `i` to the wife of man `j` when a fraction `q`
/// of any side payment survives.
pub fn exchange_utility(tau: &[usize], prefs: &QuantifiedPrefs, q: f64, i: usize, j: usize) -> f64 {
    let w = tau[j];
    let a = prefs.theta_m[i][w] - prefs.theta_m[i][tau[i]];
    let b = prefs.theta_w[i][w] - prefs.theta_w[j][w];
    (q * a + b).min(q * b + a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PqStability {
    Stable,
    /// Men `i_1..i_k`; man `i_l` moves to the wife of `i_{l+1}`.
    Violation { chain: Vec<usize>, value: f64 },
}

impl PqStability {
    pub fn is_stable(&self) -> bool {
        matches!(self, PqStability::Stable)
    }
}

const EXHAUSTIVE_MAX: usize = 8;

/// Checks that no exchange chain of at most `k_max` men has
/// `sum [Delta_q(i_l, i_{l+1})]_p > 1e-12`.
///
/// Simple cycles are enumerated for `N <= 8`; larger instances use a
/// negative-cycle search on the edge weights `-[Delta_q]_p`, where the
/// threshold is `1e-9`.
pub fn pq_stability_check(
    tau: &[usize],
    prefs: &QuantifiedPrefs,
    p: f64,
    q: f64,
    k_max: usize,
) -> Result<PqStability> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidInput(format!("p = {p} and q = {q} must lie in [0, 1]")));
    }
    let n = prefs.len();
    if tau.len() != n {
        return Err(Error::Dimension(format!("matching of size {} for {n} couples", tau.len())));
    }
    check_permutation(tau)?;
    let k_max = k_max.min(n);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i * n + j] = p_part(exchange_utility(tau, prefs, q, i, j), p);
            }
        }
    }
    if n <= EXHAUSTIVE_MAX {
        let mut best: Option<(Vec<usize>, f64)> = None;
        let mut path = Vec::with_capacity(k_max);
        let mut used = vec![false; n];
        for s in 0..n {
            path.clear();
            path.push(s);
            used[s] = true;
            chains(s, 0.0, &w, n, k_max, &mut path, &mut used, &mut best);
            used[s] = false;
        }
        return Ok(match best {
            Some((chain, value)) if value > 1e-12 => PqStability::Violation { chain, value },
            _ => PqStability::Stable,
        });
    }
    let neg = |a: usize, b: usize| -w[a * n + b];
    Ok(match crate::discrete_ot::negative_cycle(n, k_max.max(2), &neg) {
        Some((chain, v)) => PqStability::Violation { chain, value: -v },
        None => PqStability::Stable,
    })
}

#[allow(clippy::too_many_arguments)]
fn chains(
    s: usize,
    acc: f64,
    w: &[f64],
    n: usize,
    k_max: usize,
    path: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut Option<(Vec<usize>, f64)>,
) {
    let last = *path.last().unwrap();
    if path.len() >= 2 {
        let total = acc + w[last * n + s];
        if best.as_ref().map_or(true, |b| total > b.1) {
            *best = Some((path.clone(), total));
        }
    }
    if path.len() == k_max {
        return;
    }
    // canonical form: the start is the smallest index of the cycle
    for v in s + 1..n {
        if !used[v] {
            used[v] = true;
            path.push(v);
            chains(s, acc + w[last * n + v], w, n, k_max, path, used, best);
            path.pop();
            used[v] = false;
        }
    }
}

/// All stable matchings, by filtering every bijection. Requires `N <= 8`.
pub fn enumerate_stable_matchings(prefs: &PreferenceProfile) -> Result<Vec<Vec<usize>>> {
    prefs.validate()?;
    let n = prefs.len();
    if n > EXHAUSTIVE_MAX {
        return Err(Error::InvalidInput(format!("exhaustive search needs N <= {EXHAUSTIVE_MAX}, got {n}")));
    }
    let mut out = Vec::new();
    for perm in permutations(n) {
        if find_blocking_pairs(&perm, prefs)?.is_empty() {
            out.push(perm);
        }
    }
    Ok(out)
}

/// Every permutation of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(k) = (0..n.saturating_sub(1)).rev().find(|&k| cur[k] < cur[k + 1]) else { break };
        let l = (k + 1..n).rev().find(|&l| cur[k] < cur[l]).unwrap();
        cur.swap(k, l);
        cur[k + 1..].reverse();
    }
    out
}

/// Candidate-proposing deferred acceptance for firms with capacities.
///
/// `phi[i][x]` is the utility of candidate `x` for firm `i`, `psi[i][x]`
/// that of firm `i` for candidate `x`. Candidates propose in atom order;
/// each firm keeps the longest prefix of its applicants, ranked by `psi`,
/// whose mass fits its capacity. Every candidate prefers any firm to
/// unemployment. Ties in either ranking are rejected.
pub fn gs_partition(
    mu: &DiscreteMeasure,
    phi: &[Vec<f64>],
    psi: &[Vec<f64>],
    m: &CapacitySpec,
) -> Result<PartitionLabeling> {
    let k = mu.len();
    let n = m.len();
    if phi.len() != n || psi.len() != n {
        return Err(Error::Dimension(format!("{n} capacities but {} and {} utility rows", phi.len(), psi.len())));
    }
    for rows in [phi, psi] {
        for r in rows {
            if r.len() != k {
                return Err(Error::Dimension(format!("utility row of length {} for {k} candidates", r.len())));
            }
        }
    }
    check_partition_ties(phi, psi, k)?;
    // candidate x's firms, best first
    let lists: Vec<Vec<usize>> = (0..k)
        .map(|x| {
            let mut f: Vec<usize> = (0..n).collect();
            f.sort_by(|&a, &b| phi[b][x].total_cmp(&phi[a][x]));
            f
        })
        .collect();
    let w = mu.weights();
    let mut next = vec![0usize; k];
    let mut pool: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut kept: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut free: Vec<usize> = (0..k).collect();
    while !free.is_empty() {
        let mut touched = vec![false; n];
        for &x in &free {
            if next[x] < n {
                let f = lists[x][next[x]];
                next[x] += 1;
                pool[f].push(x);
                touched[f] = true;
            }
        }
        let mut rejected = Vec::new();
        for f in 0..n {
            if !touched[f] {
                continue;
            }
            pool[f].sort_by(|&a, &b| psi[f][b].total_cmp(&psi[f][a]));
            let mut mass = 0.0;
            let mut cut = pool[f].len();
            for (pos, &x) in pool[f].iter().enumerate() {
                if mass + w[x] > m.m[f] * (1.0 + 1e-12) + 1e-15 {
                    cut = pos;
                    break;
                }
                mass += w[x];
            }
            let old: Vec<usize> = std::mem::take(&mut kept[f]);
            kept[f] = pool[f][..cut].to_vec();
            for &x in pool[f][cut..].iter() {
                if old.contains(&x) || free.contains(&x) {
                    rejected.push(x);
                }
            }
        }
        rejected.sort_unstable();
        rejected.dedup();
        free = rejected.into_iter().filter(|&x| next[x] < n).collect();
    }
    let mut labels = vec![0usize; k];
    for (f, list) in kept.iter().enumerate() {
        for &x in list {
            labels[x] = f + 1;
        }
    }
    PartitionLabeling::new(n, labels)
}

fn check_partition_ties(phi: &[Vec<f64>], psi: &[Vec<f64>], k: usize) -> Result<()> {
    let n = phi.len();
    for x in 0..k {
        for i in 0..n {
            for j in i + 1..n {
                if phi[i][x] == phi[j][x] {
                    return Err(Error::Ties(format!("candidate {x} is indifferent between firms {i} and {j}")));
                }
            }
        }
    }
    for (i, row) in psi.iter().enumerate() {
        let mut v: Vec<f64> = row.clone();
        v.sort_by(f64::total_cmp);
        if v.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::Ties(format!("firm {i} ranks two candidates equally")));
        }
    }
    Ok(())
}

/// Candidate-firm pairs `(x, firm)` violating stability of a labeling:
/// `x` prefers the firm to its own (or to unemployment) and the firm
/// prefers `x` to one of its members.
pub fn audit_partition_stability(
    phi: &[Vec<f64>],
    psi: &[Vec<f64>],
    labeling: &PartitionLabeling,
) -> Vec<(usize, usize)> {
    let n = labeling.n_agents;
    let mut out = Vec::new();
    for x in 0..labeling.len() {
        let own = labeling.labels[x];
        for f in 0..n {
            if own == f + 1 {
                continue;
            }
            let prefers = own == 0 || phi[f][x] > phi[own - 1][x];
            if !prefers {
                continue;
            }
            if labeling.atoms_of(f + 1).iter().any(|&y| psi[f][x] > psi[f][y]) {
                out.push((x, f + 1));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn book_profile() -> PreferenceProfile {
        PreferenceProfile::new(
            vec![vec![0, 1, 2], vec![2, 1, 0], vec![0, 1, 2]],
            vec![vec![1, 2, 0], vec![0, 1, 2], vec![0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn men_proposing_three_by_three() {
        let tau = gale_shapley(&book_profile(), Proposing::Men).unwrap();
        assert_eq!(tau, vec![1, 2, 0]);
        assert!(find_blocking_pairs(&tau, &book_profile()).unwrap().is_empty());
        let all = enumerate_stable_matchings(&book_profile()).unwrap();
        assert!(all.contains(&tau));
    }

    #[test]
    fn single_couple() {
        let p = PreferenceProfile::new(vec![vec![0]], vec![vec![0]]).unwrap();
        assert_eq!(gale_shapley(&p, Proposing::Women).unwrap(), vec![0]);
        assert_eq!(enumerate_stable_matchings(&p).unwrap(), vec![vec![0]]);
    }

    #[test]
    fn malformed_rankings_rejected() {
        assert!(PreferenceProfile::new(vec![vec![0, 0], vec![0, 1]], vec![vec![0, 1], vec![0, 1]]).is_err());
    }

    #[test]
    fn intro_matching_is_gs_stable() {
        let q = QuantifiedPrefs::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 5.0], vec![0.0, 1.0]]).unwrap();
        assert!(find_blocking_pairs_quantified(&[0, 1], &q).unwrap().is_empty());
        assert!(find_blocking_pairs(&[0, 1], &q.to_profile().unwrap()).unwrap().is_empty());
        // fully transferable: the swap is better
        assert!(!pq_stability_check(&[0, 1], &q, 1.0, 1.0, 2).unwrap().is_stable());
        assert!(pq_stability_check(&[1, 0], &q, 1.0, 1.0, 2).unwrap().is_stable());
    }

    #[test]
    fn common_favourite_creates_blocking_pair() {
        let p = PreferenceProfile::new(vec![vec![0, 1], vec![0, 1]], vec![vec![0, 1], vec![0, 1]]).unwrap();
        assert_eq!(find_blocking_pairs(&[1, 0], &p).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn counterexample_has_no_stable_matching() {
        let q = QuantifiedPrefs::new(vec![vec![0.0, 1.0], vec![0.0, 2.0]], vec![vec![2.0, 1.0], vec![0.0, 0.0]]).unwrap();
        for tau in [[0, 1], [1, 0]] {
            assert!(!pq_stability_check(&tau, &q, 0.0, 1.0, 2).unwrap().is_stable());
        }
    }

    #[test]
    fn latin_square_count() {
        // cyclic preferences: three stable matchings
        let men = vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1]];
        let women = vec![vec![1, 2, 0], vec![2, 0, 1], vec![0, 1, 2]];
        let p = PreferenceProfile::new(men, women).unwrap();
        assert_eq!(enumerate_stable_matchings(&p).unwrap().len(), 3);
    }

    #[test]
    fn permutations_are_complete() {
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
    }

    #[test]
    fn one_firm_hires_everyone() {
        let mu = DiscreteMeasure::from_weights(vec![0.2, 0.3, 0.1]).unwrap();
        let m = CapacitySpec::at_most(vec![1.0]).unwrap();
        let l = gs_partition(&mu, &[vec![1.0, 1.0, 1.0]], &[vec![1.0, 2.0, 3.0]], &m).unwrap();
        assert_eq!(l.labels, vec![1, 1, 1]);
    }

    #[test]
    fn disjoint_top_choices() {
        let mu = DiscreteMeasure::from_weights(vec![0.25; 4]).unwrap();
        let phi = vec![vec![2.0, 2.0, 1.0, 1.0], vec![1.0, 1.0, 2.0, 2.0]];
        let psi = vec![vec![1.0, 2.0, 3.0, 4.0], vec![4.0, 3.0, 2.0, 1.0]];
        let m = CapacitySpec::at_most(vec![0.6, 0.6]).unwrap();
        let l = gs_partition(&mu, &phi, &psi, &m).unwrap();
        assert_eq!(l.labels, vec![1, 1, 2, 2]);
        assert!(audit_partition_stability(&phi, &psi, &l).is_empty());
    }

    #[test]
    fn tied_candidates_rejected() {
        let mu = DiscreteMeasure::from_weights(vec![0.5, 0.5]).unwrap();
        let m = CapacitySpec::at_most(vec![1.0]).unwrap();
        assert!(matches!(gs_partition(&mu, &[vec![1.0, 1.0]], &[vec![1.0, 1.0]], &m), Err(Error::Ties(_))));
    }
}
