use partrans::games::{
    core_nonempty, greedy_imputation, in_core, is_superadditive, is_supermodular, scaled_surplus_game, surplus_game,
    CoalitionGame,
};
use partrans::{CapacitySpec, DiscreteMeasure, FieldValues};
use proptest::prelude::*;

fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[piv][c].abs() < 1e-9 {
            return None;
        }
        a.swap(c, piv);
        b.swap(c, piv);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i][i]).collect())
}

fn choose(items: &[u32], k: usize) -> Vec<Vec<u32>> {
    if k == 0 {
        return vec![vec![]];
    }
    if items.len() < k {
        return vec![];
    }
    let mut out: Vec<Vec<u32>> = choose(&items[1..], k - 1)
        .into_iter()
        .map(|mut c| {
            c.insert(0, items[0]);
            c
        })
        .collect();
    out.extend(choose(&items[1..], k));
    out
}

/// Largest `sum lambda_J nu(J)` over the vertices of the balanced-weight
/// polytope, found by trying every square basis.
fn best_balanced(g: &CoalitionGame) -> f64 {
    let n = g.n();
    let coalitions: Vec<u32> = (1..(1u32 << n)).collect();
    let mut best = f64::NEG_INFINITY;
    for basis in choose(&coalitions, n) {
        let a: Vec<Vec<f64>> = (0..n).map(|i| basis.iter().map(|&s| f64::from((s >> i) & 1)).collect()).collect();
        if let Some(l) = solve(a, vec![1.0; n]) {
            if l.iter().all(|&v| v >= -1e-12) {
                best = best.max(l.iter().zip(&basis).map(|(w, &s)| w * g.value(s)).sum());
            }
        }
    }
    best
}

fn perms(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    perms(n - 1)
        .into_iter()
        .flat_map(|p| {
            (0..n).map(move |k| {
                let mut q = p.clone();
                q.insert(k, n - 1);
                q
            })
        })
        .collect()
}

fn game(n: usize) -> impl Strategy<Value = CoalitionGame> {
    prop::collection::vec(-1.0..2.0f64, (1usize << n) - 1).prop_map(move |v| {
        let mut nu = vec![0.0];
        nu.extend(v);
        CoalitionGame::new(n, nu).unwrap()
    })
}

fn unit(w: &[f64]) -> DiscreteMeasure {
    let s: f64 = w.iter().sum();
    DiscreteMeasure::from_weights(w.iter().map(|v| v / s).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bondareva_matches_vertex_search(g in (1..=4usize).prop_flat_map(game)) {
        let verdict = core_nonempty(&g);
        let best = best_balanced(&g);
        prop_assert!((verdict.bound() - best).abs() <= 1e-9 * (1.0 + best.abs()));
        prop_assert_eq!(verdict.is_nonempty(), best <= g.grand() + 1e-9);
    }

    #[test]
    fn supermodular_greedy_in_core(n in 1..=6usize, a in prop::collection::vec(0.0..1.0f64, 6), b in prop::collection::vec(-1.0..1.0f64, 6)) {
        // a convex function of an additive measure plus an additive part
        let g = CoalitionGame::from_fn(n, |s| {
            let (mut x, mut y) = (0.0, 0.0);
            for i in 0..n {
                if s >> i & 1 == 1 {
                    x += a[i];
                    y += b[i];
                }
            }
            x * x + y
        })
        .unwrap();
        prop_assert!(is_supermodular(&g).holds);
        for order in perms(n) {
            let x = greedy_imputation(&g, &order).unwrap();
            prop_assert!(in_core(&g, &x, 1e-9));
        }
    }

    #[test]
    fn scaled_surplus_is_superadditive(
        steps in prop::collection::vec(0.0..1.0f64, 1..=5),
        m in prop::collection::vec(0.01..1.0f64, 5),
        base in prop::collection::vec(0.0..1.0f64, 20),
        w in prop::collection::vec(0.1..1.0f64, 20),
        fill in 0.2..1.0f64,
    ) {
        let n = steps.len();
        let mut lambda = Vec::with_capacity(n);
        let mut l = 1.0;
        for s in &steps {
            lambda.push(l);
            l += s + 1e-3;
        }
        let total: f64 = m[..n].iter().sum();
        let m: Vec<f64> = m[..n].iter().map(|v| v * fill / total).collect();
        let g = scaled_surplus_game(&lambda, &base, &unit(&w), &m).unwrap();
        prop_assert!(is_superadditive(&g).holds);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn surplus_respects_complements(
        rows in prop::collection::vec(prop::collection::vec(-0.2..1.0f64, 15), 3),
        w in prop::collection::vec(0.1..1.0f64, 15),
        m in prop::collection::vec(0.05..0.6f64, 3),
    ) {
        let theta = FieldValues::from_rows(&rows).unwrap();
        let g = surplus_game(&theta, &CapacitySpec::at_most(m).unwrap(), &unit(&w)).unwrap();
        let full = g.full();
        for s in 1..full {
            prop_assert!(g.value(s) + g.value(full ^ s) <= g.grand() + 1e-8);
        }
    }
}
