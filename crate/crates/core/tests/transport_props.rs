use partrans::discrete_ot::{
    c_transform, check_cyclical_monotonicity, solve_assignment, solve_kantorovich, Balance, Sense, Side,
};
use partrans::{restrict, DiscreteMeasure, PartitionLabeling};
use proptest::prelude::*;

fn square(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-1.0..1.0f64, n), n))
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, n)
}

fn unit(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    (1..10usize, 1..10usize).prop_flat_map(|(n, m)| {
        (weights(n), weights(m), prop::collection::vec(prop::collection::vec(0.0..1.0f64, m), n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn restriction_preserves_mass(w in weights(12), labels in prop::collection::vec(0..4usize, 12)) {
        let mu = DiscreteMeasure::from_weights(w).unwrap();
        let lab = PartitionLabeling::new(3, labels.clone()).unwrap();
        let mut total: f64 = (1..=3).map(|i| restrict(&mu, &lab, i).unwrap().total_mass()).sum();
        total += labels.iter().zip(mu.weights()).filter(|(&l, _)| l == 0).map(|(_, w)| w).sum::<f64>();
        prop_assert!((total - mu.total_mass()).abs() <= 1e-12 * mu.total_mass());
    }

    #[test]
    fn birkhoff_equality(theta in square(8)) {
        let n = theta.len();
        let mu = DiscreteMeasure::from_weights(vec![1.0; n]).unwrap();
        let lp = solve_kantorovich(&mu, &mu, &theta, Sense::Max, Balance::Balanced).unwrap();
        let a = solve_assignment(&theta).unwrap();
        prop_assert!((lp.plan.value - a.value).abs() <= 1e-10);
    }

    #[test]
    fn duality_and_monotonicity((a, b, theta) in instance(), relaxed in any::<bool>(), max in any::<bool>()) {
        let mu = DiscreteMeasure::from_weights(unit(&a)).unwrap();
        let scale = if relaxed { 0.7 } else { 1.0 };
        let nu = DiscreteMeasure::from_weights(unit(&b).iter().map(|v| v * scale).collect()).unwrap();
        let sense = if max { Sense::Max } else { Sense::Min };
        let balance = if relaxed { Balance::Relaxed } else { Balance::Balanced };
        let s = solve_kantorovich(&mu, &nu, &theta, sense, balance).unwrap();
        let primal = s.plan.evaluate(&theta);
        let dual = s.duals.value(&mu, &nu);
        prop_assert!((primal - dual).abs() <= 1e-8 * (1.0 + primal.abs()));
        let k = theta.len().max(2);
        prop_assert!(check_cyclical_monotonicity(&s.plan, &theta, sense, k).unwrap().is_certified());
    }

    #[test]
    fn triple_transform_is_single(
        theta in prop::collection::vec(prop::collection::vec(-20i32..20, 5), 4),
        f in prop::collection::vec(-20i32..20, 4),
    ) {
        // small integers keep every subtraction exact
        let theta: Vec<Vec<f64>> = theta.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let f: Vec<f64> = f.iter().map(|&v| v as f64).collect();
        let g = c_transform(&f, &theta, Side::Target);
        let h = c_transform(&g, &theta, Side::Source);
        let k = c_transform(&h, &theta, Side::Target);
        prop_assert_eq!(k, g);
    }
}
