//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use partrans::discrete_ot::{solve_assignment, solve_kantorovich, Balance, Sense};
use partrans::games::{core_nonempty, free_price_equilibrium, in_core, nash_check_free, CoalitionGame, CoreVerdict};
use partrans::interpolated::{gap_phi, lloyd_loop, mccann_interpolate, power_cost_matrix, CostPair, SiteSet};
use partrans::matching::{
    find_blocking_pairs, find_blocking_pairs_quantified, gale_shapley, pq_stability_check, PreferenceProfile,
    Proposing, QuantifiedPrefs,
};
use partrans::multipartition::{convex_criterion_check, feasibility_test, AffineMax, GoodsField, Mode, Verdict};
use partrans::semidiscrete::{dual_objective, solve_prices};
use partrans::{CapacitySpec, DiscreteMeasure, FieldValues, WeakPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(r: &mut impl Rng, n: usize, m: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| r.gen_range(lo..hi)).collect()).collect()
}

fn line_measure(r: &mut impl Rng, n: usize, total: f64) -> DiscreteMeasure {
    let xs: Vec<f64> = (0..n).map(|_| r.gen()).collect();
    let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    DiscreteMeasure::on_line(&xs, raw.iter().map(|w| w * total / s).collect()).unwrap()
}

fn cloud(r: &mut impl Rng, n: usize) -> DiscreteMeasure {
    let xs: Vec<f64> = (0..n).map(|_| r.gen()).collect();
    DiscreteMeasure::on_line(&xs, vec![1.0 / n as f64; n]).unwrap()
}

/// Best permutation value by walking all permutations (Heap's algorithm).
fn brute_assignment(theta: &[Vec<f64>]) -> f64 {
    let n = theta.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| theta[i][j]).sum::<f64>();
    let mut best = score(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.max(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in all_permutations(n - 1) {
        for k in 0..n {
            let mut q = p.clone();
            q.insert(k, n - 1);
            out.push(q);
        }
    }
    out
}

fn birkhoff() -> Outcome {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for t in 0..100 {
        let n = 1 + t % 7;
        let theta = matrix(&mut r, n, n, -1.0, 1.0);
        let ones = vec![1.0; n];
        let xs: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let mu = DiscreteMeasure::on_line(&xs, ones.clone()).unwrap();
        let nu = DiscreteMeasure::on_line(&xs, ones).unwrap();
        let lp = solve_kantorovich(&mu, &nu, &theta, Sense::Max, Balance::Balanced).unwrap();
        let best = brute_assignment(&theta);
        let hung = solve_assignment(&theta).unwrap().value;
        let d = (lp.plan.value - best).abs().max((hung - best).abs());
        worst = worst.max(d);
        ensure(d <= 1e-9, || format!("instance {t}: LP {} vs permutation {best}", lp.plan.value))?;
    }
    Ok(format!("100 matrices, max |LP - best permutation| = {worst:.1e}"))
}

fn intro_example() -> Outcome {
    let prefs = QuantifiedPrefs::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 5.0], vec![0.0, 1.0]])
        .map_err(|e| e.to_string())?;
    let profile = prefs.to_profile().map_err(|e| e.to_string())?;
    let tau = gale_shapley(&profile, Proposing::Men).unwrap();
    ensure(tau == vec![0, 1], || format!("stable matching {tau:?}"))?;
    let blocking = find_blocking_pairs(&tau, &profile).unwrap();
    ensure(blocking.is_empty(), || format!("blocking pairs {blocking:?}"))?;
    let best = solve_assignment(&prefs.total()).unwrap();
    ensure(best.perm == vec![1, 0], || format!("transferable optimum {:?}", best.perm))?;
    ensure(best.value == 5.0, || format!("transferable value {}", best.value))?;
    Ok("GS gives {11,22} with no blocking pair; transferable optimum {12,21} = 5".into())
}

fn kantorovich_gap(r: &mut impl Rng, t: usize) -> Result<f64, String> {
    let n = r.gen_range(2..25);
    let m = r.gen_range(2..25);
    let regime = t % 3;
    let mu = line_measure(r, n, 1.0);
    let nu = line_measure(r, m, [0.6, 1.0, 1.5][regime]);
    let sense = if t % 2 == 0 { Sense::Max } else { Sense::Min };
    let balance = if regime == 1 { Balance::Balanced } else { Balance::Relaxed };
    let theta = matrix(r, n, m, 0.0, 1.0);
    let s = solve_kantorovich(&mu, &nu, &theta, sense, balance).map_err(|e| format!("kantorovich {t}: {e}"))?;
    let (rows, cols) = (s.plan.row_sums(), s.plan.col_sums());
    let over = rows.iter().zip(mu.weights()).chain(cols.iter().zip(nu.weights())).map(|(a, b)| a - b).fold(0.0, f64::max);
    ensure(over <= 1e-9, || format!("kantorovich {t}: plan exceeds a marginal by {over}"))?;
    let moved: f64 = rows.iter().sum();
    let need = mu.total_mass().min(nu.total_mass());
    if balance == Balance::Balanced || sense == Sense::Min {
        ensure((moved - need).abs() <= 1e-9, || format!("kantorovich {t}: moved {moved} of {need}"))?;
    }
    let primal = s.plan.evaluate(&theta);
    let dual = mu.integrate(&s.duals.xi) + nu.integrate(&s.duals.p);
    let infeas = s.duals.infeasibility(&theta, sense);
    ensure(infeas <= 1e-9, || format!("kantorovich {t}: dual infeasible by {infeas}"))?;
    if balance == Balance::Relaxed && sense == Sense::Max {
        let neg = s.duals.xi.iter().chain(&s.duals.p).cloned().fold(0.0, f64::min);
        ensure(neg >= -1e-12, || format!("kantorovich {t}: negative potential {neg}"))?;
    }
    let gap = (dual - primal).abs();
    ensure(gap <= 1e-6 * (1.0 + primal.abs()), || format!("kantorovich {t}: primal {primal} dual {dual}"))?;
    Ok(gap)
}

fn prices_gap(r: &mut impl Rng, t: usize) -> Result<f64, String> {
    let atoms = r.gen_range(20..200);
    let agents = r.gen_range(2..6);
    let mu = line_measure(r, atoms, 1.0);
    let theta = FieldValues::from_rows(&matrix(r, agents, atoms, -0.2, 1.0)).unwrap();
    let regime = t % 4;
    let total = [0.6, 1.0, 1.4, 0.6][regime];
    let raw: Vec<f64> = (0..agents).map(|_| r.gen_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let m: Vec<f64> = raw.iter().map(|v| v * total / s).collect();
    let spec = match regime {
        0 | 1 => CapacitySpec::exact(m.clone()),
        _ => CapacitySpec::at_most(m.clone()),
    }
    .unwrap();
    let res = solve_prices(&mu, &theta, &spec, None).map_err(|e| format!("prices {t}: {e}"))?;
    let w = mu.weights();
    let mut mass = vec![0.0; agents];
    let mut primal = 0.0;
    for (x, row) in res.weak.gamma.iter().enumerate() {
        for (i, &g) in row.iter().enumerate() {
            mass[i] += w[x] * g;
            primal += w[x] * g * theta.get(i, x);
        }
    }
    for i in 0..agents {
        let ok = if regime <= 1 { (mass[i] - m[i]).abs() <= 1e-9 } else { mass[i] <= m[i] + 1e-9 };
        ensure(ok, || format!("prices {t}: agent {i} serves {} against {}", mass[i], m[i]))?;
    }
    let dual = dual_objective(&res.prices, &theta, &mu, &m, res.formulation);
    let gap = (dual - primal).abs();
    ensure(gap <= 1e-6 * (1.0 + primal.abs()), || format!("prices {t}: primal {primal} dual {dual}"))?;
    Ok(gap)
}

fn duality_gaps() -> Outcome {
    let mut r = rng(3);
    let mut worst = (0.0f64, 0.0f64);
    for t in 0..200 {
        worst.0 = worst.0.max(kantorovich_gap(&mut r, t)?);
        worst.1 = worst.1.max(prices_gap(&mut r, t)?);
    }
    Ok(format!("200 + 200 instances, worst gaps {:.1e} (transport), {:.1e} (prices)", worst.0, worst.1))
}

fn empty_core() -> Outcome {
    let mut nu = vec![0.0; 8];
    for s in [3, 5, 6] {
        nu[s] = 0.75;
    }
    nu[7] = 1.0;
    let g = CoalitionGame::new(3, nu).unwrap();
    match core_nonempty(&g) {
        CoreVerdict::Empty { certificate, bound } => {
            let mut got: Vec<(u32, f64)> = certificate.iter().map(|w| (w.coalition, w.weight)).collect();
            got.sort_by_key(|w| w.0);
            ensure(got.len() == 3, || format!("certificate {got:?}"))?;
            for (w, want) in got.iter().zip([3, 5, 6]) {
                ensure(w.0 == want && (w.1 - 0.5).abs() <= 1e-9, || format!("certificate {got:?}"))?;
            }
            ensure((bound - 1.125).abs() <= 1e-9, || format!("bound {bound}"))?;
        }
        v => return Err(format!("expected an empty core, got {v:?}")),
    }
    let mut r = rng(4);
    for t in 0..50 {
        let n = 1 + t % 8;
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let g = CoalitionGame::additive(&a).unwrap();
        match core_nonempty(&g) {
            CoreVerdict::Nonempty { imputation, .. } => {
                ensure(in_core(&g, &imputation, 1e-9), || format!("additive {t}: imputation not in core"))?;
            }
            v => return Err(format!("additive game {t} reported {v:?}")),
        }
    }
    Ok("certificate 1/2 on {12},{13},{23}; 50 additive games nonempty".into())
}

fn closed_form_values() -> Outcome {
    let k = 10_000;
    let xs: Vec<f64> = (0..k).map(|q| (q as f64 + 0.5) / k as f64).collect();
    let mu = DiscreteMeasure::on_line(&xs, vec![1.0 / k as f64; k]).unwrap();
    let lambda = [1.0, 2.0, 3.0];
    let rows: Vec<Vec<f64>> = lambda.iter().map(|l| xs.iter().map(|x| l * (1.0 - x)).collect()).collect();
    let theta = FieldValues::from_rows(&rows).unwrap();
    // F(m) = int_0^m (1 - x) dx
    let f = |m: f64| m - m * m / 2.0;
    let mut worst = 0.0f64;
    for m in [[0.2, 0.25, 0.3], [0.3, 0.3, 0.4], [0.1, 0.5, 0.2]] {
        let res = solve_prices(&mu, &theta, &CapacitySpec::exact(m.to_vec()).unwrap(), None).map_err(|e| e.to_string())?;
        for i in 0..3 {
            let hi: f64 = m[i..].iter().sum();
            let lo: f64 = m[i + 1..].iter().sum();
            let want = lambda[i] * (f(hi) - f(lo));
            let d = (res.values[i] - want).abs();
            worst = worst.max(d);
            ensure(d <= 1e-3, || format!("m = {m:?}, agent {i}: {} vs {want}", res.values[i]))?;
        }
    }
    Ok(format!("3 capacity vectors on 10^4 atoms, max |V_i - closed form| = {worst:.1e}"))
}

fn semi_finite() -> Outcome {
    let mut r = rng(6);
    let mut min_gap = f64::INFINITY;
    for t in 0..50 {
        let n = r.gen_range(3..15);
        let (mu, nu) = (cloud(&mut r, n), cloud(&mut r, n));
        let k = r.gen_range(1..6);
        let sites = SiteSet::new((0..k).map(|_| vec![r.gen_range(-0.2..1.2)]).collect()).unwrap();
        let (costs, rexp) = match t % 3 {
            0 => (CostPair::Split { r: 2.0 }, 2.0),
            1 => (CostPair::Split { r: 1.5 }, 1.5),
            _ => (CostPair::Split { r: 3.0 }, 3.0),
        };
        let exact = power_cost_matrix(&mu, &nu, rexp).unwrap();
        let g = gap_phi(&mu, &nu, &sites, &costs, &exact).map_err(|e| e.to_string())?;
        min_gap = min_gap.min(g.gap);
        ensure(g.gap >= -1e-8, || format!("instance {t}: gap {}", g.gap))?;
    }
    let mut worst_rise = f64::NEG_INFINITY;
    for t in 0..50 {
        let n = r.gen_range(5..16);
        let (mu, nu) = (cloud(&mut r, n), cloud(&mut r, n));
        let k = r.gen_range(2..5);
        let sites = SiteSet::new((0..k).map(|_| vec![r.gen()]).collect()).unwrap();
        let costs = if t % 2 == 0 { CostPair::Split { r: 2.0 } } else { CostPair::Power { r: 2.0, a: 1.0, b: 2.0 } };
        let trace = lloyd_loop(&mu, &nu, &sites, &costs, 15).map_err(|e| e.to_string())?;
        for w in trace.values.windows(2) {
            let rise = w[1] - w[0];
            worst_rise = worst_rise.max(rise);
            ensure(rise <= 1e-9 * (1.0 + w[0].abs()), || format!("trajectory {t}: {} -> {}", w[0], w[1]))?;
        }
    }
    let mut ratios = Vec::new();
    let costs = CostPair::Split { r: 2.0 };
    for _ in 0..20 {
        let (mu, nu) = (cloud(&mut r, 40), cloud(&mut r, 40));
        let exact = power_cost_matrix(&mu, &nu, 2.0).unwrap();
        let coarse = gap_phi(&mu, &nu, &SiteSet::grid_1d(0.0, 1.0, 4).unwrap(), &costs, &exact).unwrap().gap;
        let fine = gap_phi(&mu, &nu, &SiteSet::grid_1d(0.0, 1.0, 8).unwrap(), &costs, &exact).unwrap().gap;
        ensure(fine > 0.0, || "refined gap vanished".into())?;
        ratios.push(coarse / fine);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    ensure((2.5..=6.0).contains(&mean), || format!("mean refinement ratio {mean}"))?;
    Ok(format!(
        "min gap {min_gap:.1e}, largest Lloyd step {worst_rise:.1e}, mean refinement ratio {mean:.2}"
    ))
}

/// `W_2` between equal-weight clouds on the line: sort and pair.
fn w2_sorted(a: &DiscreteMeasure, b: &DiscreteMeasure) -> f64 {
    let mut xa = a.xs();
    let mut xb = b.xs();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let n = xa.len() as f64;
    (xa.iter().zip(&xb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt()
}

fn mccann() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for t in 0..50 {
        let n = r.gen_range(2..40);
        let (mu, nu) = (cloud(&mut r, n), cloud(&mut r, n));
        let w = w2_sorted(&mu, &nu);
        for s in [0.1, 0.25, 0.5, 0.9] {
            let ms = mccann_interpolate(&mu, &nu, s).map_err(|e| e.to_string())?;
            let d0 = (w2_sorted(&mu, &ms) - s * w).abs();
            let d1 = (w2_sorted(&nu, &ms) - (1.0 - s) * w).abs();
            worst = worst.max(d0).max(d1);
            ensure(d0 <= 1e-9 && d1 <= 1e-9, || format!("cloud {t}, s = {s}: deviations {d0:.2e}, {d1:.2e}"))?;
        }
    }
    Ok(format!("50 clouds x 4 times, max deviation {worst:.1e}"))
}

fn ranks_to_utilities(prefs: &PreferenceProfile) -> QuantifiedPrefs {
    let n = prefs.men.len();
    let mut tm = vec![vec![0.0; n]; n];
    let mut tw = vec![vec![0.0; n]; n];
    for i in 0..n {
        for (pos, &j) in prefs.men[i].iter().enumerate() {
            tm[i][j] = (n - pos) as f64;
        }
    }
    for j in 0..n {
        for (pos, &i) in prefs.women[j].iter().enumerate() {
            tw[i][j] = (n - pos) as f64;
        }
    }
    QuantifiedPrefs::new(tm, tw).unwrap()
}

fn endpoint_agreement(prefs: &QuantifiedPrefs, ordinal: Option<&PreferenceProfile>) -> Result<(), String> {
    let n = prefs.len();
    let total = prefs.total();
    let best = brute_assignment(&total);
    for tau in all_permutations(n) {
        let blocking = match ordinal {
            Some(p) => find_blocking_pairs(&tau, p).unwrap(),
            None => find_blocking_pairs_quantified(&tau, prefs).unwrap(),
        };
        let s00 = pq_stability_check(&tau, prefs, 0.0, 0.0, n).unwrap().is_stable();
        ensure(s00 == blocking.is_empty(), || format!("(0,0) disagrees on {tau:?}: blocking {blocking:?}"))?;
        let value: f64 = tau.iter().enumerate().map(|(i, &j)| total[i][j]).sum();
        let s11 = pq_stability_check(&tau, prefs, 1.0, 1.0, n).unwrap().is_stable();
        ensure(s11 == (value >= best - 1e-9), || format!("(1,1) disagrees on {tau:?}: {value} vs {best}"))?;
    }
    Ok(())
}

fn pq_endpoints() -> Outcome {
    let mut checked = 0;
    for n in 1..=3 {
        let perms = all_permutations(n);
        let sides = 2 * n;
        let count = perms.len().pow(sides as u32);
        for code in 0..count {
            let mut c = code;
            let mut lists = Vec::with_capacity(sides);
            for _ in 0..sides {
                lists.push(perms[c % perms.len()].clone());
                c /= perms.len();
            }
            let women = lists.split_off(n);
            let profile = PreferenceProfile { men: lists, women };
            endpoint_agreement(&ranks_to_utilities(&profile), Some(&profile))?;
            checked += 1;
        }
    }
    let mut r = rng(8);
    for n in 1..=5 {
        for _ in 0..60 {
            let prefs = QuantifiedPrefs::new(matrix(&mut r, n, n, 0.0, 1.0), matrix(&mut r, n, n, 0.0, 1.0)).unwrap();
            endpoint_agreement(&prefs, None)?;
            checked += 1;
        }
    }
    Ok(format!("{checked} profiles, every matching checked at both endpoints"))
}

fn random_weak(r: &mut impl Rng, atoms: usize, agents: usize) -> WeakPartition {
    let gamma = (0..atoms)
        .map(|_| {
            let raw: Vec<f64> = (0..agents).map(|_| -r.gen::<f64>().max(1e-12).ln()).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    WeakPartition::new(agents, gamma).unwrap()
}

fn random_goods(r: &mut impl Rng, atoms: usize, goods: usize) -> GoodsField {
    let rows: Vec<Vec<f64>> = (0..atoms)
        .map(|_| {
            let raw: Vec<f64> = (0..goods).map(|_| r.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let rest: f64 = row[1..].iter().sum();
            row[0] = 1.0 - rest;
            row
        })
        .collect();
    GoodsField::new(&rows).unwrap()
}

fn multipartition() -> Outcome {
    let mut r = rng(9);
    let mut worst = f64::INFINITY;
    for t in 0..100 {
        let atoms = r.gen_range(5..30);
        let (agents, goods) = (r.gen_range(2..4), r.gen_range(2..4));
        let mu = line_measure(&mut r, atoms, 1.0);
        let z = random_goods(&mut r, atoms, goods);
        let m = z.capacities(&mu, &random_weak(&mut r, atoms, agents));
        let f = feasibility_test(&m, &mu, &z, Mode::Partition).map_err(|e| e.to_string())?;
        ensure(f.verdict == Verdict::Feasible, || format!("feasible instance {t} reported {:?}", f.verdict))?;
        let family: Vec<AffineMax> = (0..200).map(|_| AffineMax::random(goods, r.gen_range(1..5), &mut r)).collect();
        let res = convex_criterion_check(&m, &mu, &z, &family).unwrap();
        worst = worst.min(res);
        ensure(res >= -1e-9, || format!("feasible instance {t}: convex criterion {res}"))?;
    }
    let mut certs = f64::NEG_INFINITY;
    let mut t = 0;
    while t < 100 {
        let atoms = r.gen_range(5..30);
        let (agents, goods) = (r.gen_range(2..4), r.gen_range(2..4));
        let mu = line_measure(&mut r, atoms, 1.0);
        let z = random_goods(&mut r, atoms, goods);
        // the argmax labeling of a price matrix maximizes P:M, so moving M
        // further along P leaves the feasible set
        let p = matrix(&mut r, agents, goods, -1.0, 1.0);
        let labels: Vec<usize> = (0..atoms)
            .map(|x| {
                let score = |i: usize| p[i].iter().zip(z.at(x)).map(|(a, b)| a * b).sum::<f64>();
                1 + (0..agents).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap()
            })
            .collect();
        let lab = partrans::PartitionLabeling::new(agents, labels).unwrap();
        let mut m = z.capacities(&mu, &WeakPartition::from_labeling(&lab));
        let mean: Vec<f64> = (0..goods).map(|k| p.iter().map(|row| row[k]).sum::<f64>() / agents as f64).collect();
        let delta = 1e-2;
        for i in 0..agents {
            for k in 0..goods {
                m[i][k] += delta * (p[i][k] - mean[k]);
            }
        }
        if m.iter().flatten().any(|&v| v < 0.0) {
            continue;
        }
        let f = feasibility_test(&m, &mu, &z, Mode::Partition).map_err(|e| e.to_string())?;
        ensure(f.verdict == Verdict::Infeasible, || format!("pushed instance {t} reported {:?}", f.verdict))?;
        let c = f.certificate.ok_or_else(|| format!("pushed instance {t} has no certificate"))?;
        certs = certs.max(c.value);
        ensure(c.value < -1e-6, || format!("pushed instance {t}: certificate value {}", c.value))?;
        t += 1;
    }
    Ok(format!("min convex residual {worst:.1e} over 100 x 200; worst certificate {certs:.1e}"))
}

/// Brute-force audit: agent `i` tries every grid charge at every atom.
fn free_audit_oracle(charges: &[Vec<f64>], theta: &FieldValues, mu: &DiscreteMeasure, step: f64) -> f64 {
    let n = theta.n_agents();
    let served_by = |c: &[Vec<f64>], x: usize| -> Option<usize> {
        let mut best: Option<(usize, f64, f64)> = None;
        for k in 0..n {
            let res = theta.get(k, x) - c[k][x];
            if res < 0.0 {
                continue;
            }
            best = match best {
                Some((b, r, ch)) if r > res + 1e-12 || ((r - res).abs() <= 1e-12 && ch >= c[k][x]) => Some((b, r, ch)),
                _ => Some((k, res, c[k][x])),
            };
        }
        best.map(|b| b.0)
    };
    let mut gain = f64::NEG_INFINITY;
    for i in 0..n {
        let mut base = 0.0;
        let mut dev = 0.0;
        for (x, &w) in mu.weights().iter().enumerate() {
            if served_by(charges, x) == Some(i) {
                base += w * charges[i][x];
            }
            let top = (theta.get(i, x).max(0.0) / step).ceil() as usize + 1;
            let mut best = 0.0f64;
            let mut c = charges.to_vec();
            for k in 0..=top {
                c[i][x] = k as f64 * step;
                if served_by(&c, x) == Some(i) {
                    best = best.max(c[i][x]);
                }
            }
            dev += w * best;
        }
        gain = gain.max(dev - base);
    }
    gain
}

fn free_prices() -> Outcome {
    let mut r = rng(10);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..20 {
        let agents = 2 + t % 2;
        let atoms = r.gen_range(10..40);
        let mu = line_measure(&mut r, atoms, 1.0);
        let theta = FieldValues::from_rows(&matrix(&mut r, agents, atoms, -0.3, 1.0)).unwrap();
        let eq = free_price_equilibrium(&theta, &mu).map_err(|e| e.to_string())?;
        let report = nash_check_free(&eq.charges, &theta, &mu, 1e-3).map_err(|e| e.to_string())?;
        let oracle = free_audit_oracle(&eq.charges, &theta, &mu, 1e-3);
        worst = worst.max(report.improvement).max(oracle);
        ensure(report.improvement <= 1e-3, || format!("instance {t}: audit gain {}", report.improvement))?;
        ensure(oracle <= 1e-3, || format!("instance {t}: brute-force gain {oracle}"))?;
        for (x, &l) in eq.labeling.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let mut u: Vec<f64> = theta.at(x).to_vec();
            u.sort_by(|a, b| b.total_cmp(a));
            let second = u.get(1).copied().unwrap_or(0.0).max(0.0);
            let d = (eq.residuals[x] - second).abs();
            ensure(d <= 1e-12, || format!("instance {t}, atom {x}: residual {} vs {second}", eq.residuals[x]))?;
        }
    }
    Ok(format!("20 instances, largest unilateral gain {worst:.1e}"))
}

fn value_monotonicity() -> Outcome {
    let mut r = rng(11);
    let mut slack = f64::INFINITY;
    for t in 0..50 {
        let atoms = r.gen_range(20..120);
        let mu = line_measure(&mut r, atoms, 1.0);
        let rows = matrix(&mut r, 2, atoms, 0.0, 1.0);
        let m1 = r.gen_range(0.1..0.5);
        let m2 = r.gen_range(0.1..1.0 - m1);
        let spec = CapacitySpec::exact(vec![m1, m2]).unwrap();
        let base = solve_prices(&mu, &FieldValues::from_rows(&rows).unwrap(), &spec, None).map_err(|e| e.to_string())?;
        let v1 = base.values[0];
        for beta in [1.5, 2.0, 3.0] {
            let mut scaled = rows.clone();
            scaled[0].iter_mut().for_each(|v| *v *= beta);
            let res = solve_prices(&mu, &FieldValues::from_rows(&scaled).unwrap(), &spec, None).map_err(|e| e.to_string())?;
            let d = res.values[0] - (beta - 1.0) * v1;
            slack = slack.min(d);
            ensure(d >= -1e-8, || format!("instance {t}, beta {beta}: {} < {}", res.values[0], (beta - 1.0) * v1))?;
        }
    }
    Ok(format!("50 instances x 3 scales, min slack {slack:.2e}"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("birkhoff equality", birkhoff),
        ("intro example", intro_example),
        ("duality gaps", duality_gaps),
        ("empty core", empty_core),
        ("closed-form partition values", closed_form_values),
        ("semi-finite approximation", semi_finite),
        ("mccann identities", mccann),
        ("(p,q) endpoints", pq_endpoints),
        ("multipartition feasibility", multipartition),
        ("free-price equilibrium", free_prices),
        ("value monotonicity", value_monotonicity),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} ({secs:.1}s)", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} ({secs:.1}s)", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
