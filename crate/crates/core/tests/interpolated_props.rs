use partrans::interpolated::{
    dual_value, gap_phi, lloyd_loop, mccann_interpolate, power_cost_matrix, solve_congruent, w1d, CostPair, SiteSet,
};
use partrans::DiscreteMeasure;
use proptest::prelude::*;

fn cloud(n: usize) -> impl Strategy<Value = DiscreteMeasure> {
    prop::collection::vec(0.0..1.0f64, n).prop_map(move |xs| DiscreteMeasure::on_line(&xs, vec![1.0 / n as f64; n]).unwrap())
}

fn pair() -> impl Strategy<Value = (DiscreteMeasure, DiscreteMeasure)> {
    (2..12usize).prop_flat_map(|n| (cloud(n), cloud(n)))
}

fn sites(max: usize) -> impl Strategy<Value = SiteSet> {
    prop::collection::vec(-0.2..1.2f64, 1..=max).prop_map(|v| SiteSet::new(v.into_iter().map(|x| vec![x]).collect()).unwrap())
}

fn costs() -> impl Strategy<Value = (CostPair, f64)> {
    prop_oneof![Just((CostPair::Split { r: 2.0 }, 2.0)), Just((CostPair::Split { r: 1.5 }, 1.5)), Just((CostPair::Split { r: 3.0 }, 3.0))]
}

fn cell_mass(gamma: &[Vec<f64>], w: &[f64], i: usize) -> f64 {
    gamma.iter().zip(w).map(|(r, w)| r[i] * w).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dual_is_concave(
        (mu, nu) in pair(),
        z in sites(5),
        p in prop::collection::vec(-1.0..1.0f64, 5),
        q in prop::collection::vec(-1.0..1.0f64, 5),
        t in 0.0..1.0f64,
    ) {
        let c = CostPair::Split { r: 2.0 };
        let k = z.len();
        let (p, q) = (&p[..k], &q[..k]);
        let mid: Vec<f64> = p.iter().zip(q).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let f = |v: &[f64]| dual_value(v, &mu, &nu, &z, &c).unwrap().0;
        prop_assert!(f(&mid) >= t * f(p) + (1.0 - t) * f(q) - 1e-12);
    }

    #[test]
    fn restricted_cost_dominates((mu, nu) in pair(), z in sites(5), (c, r) in costs()) {
        let exact = power_cost_matrix(&mu, &nu, r).unwrap();
        prop_assert!(gap_phi(&mu, &nu, &z, &c, &exact).unwrap().gap >= -1e-8);
    }

    #[test]
    fn congruent_cells_match((mu, nu) in pair(), z in sites(4)) {
        let part = solve_congruent(&mu, &nu, &z, &CostPair::Split { r: 2.0 }).unwrap();
        for i in 0..z.len() {
            let a = cell_mass(&part.weak_mu.gamma, mu.weights(), i);
            let b = cell_mass(&part.weak_nu.gamma, nu.weights(), i);
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn lloyd_never_increases((mu, nu) in pair(), z in sites(4)) {
        let trace = lloyd_loop(&mu, &nu, &z, &CostPair::Split { r: 2.0 }, 8).unwrap();
        for w in trace.values.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn mccann_distances_are_linear((mu, nu) in pair(), s in 0.0..1.0f64) {
        let ms = mccann_interpolate(&mu, &nu, s).unwrap();
        let w = w1d(&mu, &nu, 2.0).unwrap();
        prop_assert!((w1d(&mu, &ms, 2.0).unwrap() - s * w).abs() <= 1e-9);
        prop_assert!((w1d(&nu, &ms, 2.0).unwrap() - (1.0 - s) * w).abs() <= 1e-9);
    }
}
