use partrans::semidiscrete::{solve_prices, xi_plus, xi_saturated};
use partrans::{CapacitySpec, DiscreteMeasure, FieldValues};
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Instance {
    w: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl Instance {
    fn mu(&self) -> DiscreteMeasure {
        let s: f64 = self.w.iter().sum();
        DiscreteMeasure::from_weights(self.w.iter().map(|v| v / s).collect()).unwrap()
    }

    fn theta(&self) -> FieldValues {
        FieldValues::from_rows(&self.rows).unwrap()
    }
}

fn instance(agents: std::ops::Range<usize>) -> impl Strategy<Value = Instance> {
    (agents, 5..60usize).prop_flat_map(|(n, k)| {
        (prop::collection::vec(0.1..1.0f64, k), prop::collection::vec(prop::collection::vec(-0.3..1.0f64, k), n))
            .prop_map(|(w, rows)| Instance { w, rows })
    })
}

fn shares(n: usize, total: f64, raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw[..n].iter().sum();
    raw[..n].iter().map(|v| v * total / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn weak_duality(
        inst in instance(1..5),
        labels in prop::collection::vec(0..5usize, 60),
        p in prop::collection::vec(-1.0..1.0f64, 4),
        slack in prop::collection::vec(0.0..0.2f64, 4),
    ) {
        let (mu, theta) = (inst.mu(), inst.theta());
        let n = theta.n_agents();
        let w = mu.weights();
        let mut m = slack[..n].to_vec();
        let mut value = 0.0;
        for x in 0..mu.len() {
            let l = labels[x] % (n + 1);
            if l > 0 {
                m[l - 1] += w[x];
                value += w[x] * theta.get(l - 1, x);
            }
        }
        let p = &p[..n];
        let xi = xi_plus(p, &theta, &mu).unwrap().0;
        let bound = xi + p.iter().zip(&m).map(|(a, b)| a.max(0.0) * b).sum::<f64>();
        prop_assert!(value <= bound + 1e-9);
    }

    #[test]
    fn solver_output_is_certified(inst in instance(1..5), raw in prop::collection::vec(0.1..1.0f64, 4), regime in 0..3usize) {
        let (mu, theta) = (inst.mu(), inst.theta());
        let n = theta.n_agents();
        let m = shares(n, [0.6, 1.0, 1.3][regime], &raw);
        let spec = if regime == 2 { CapacitySpec::at_most(m.clone()) } else { CapacitySpec::exact(m.clone()) }.unwrap();
        let r = solve_prices(&mu, &theta, &spec, None).unwrap();
        prop_assert!(r.gap.abs() <= 1e-6 * (1.0 + r.primal_value.abs()));
        for i in 0..n {
            if regime == 2 {
                prop_assert!(r.masses[i] <= m[i] + 1e-9);
            } else {
                prop_assert!((r.masses[i] - m[i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn saturated_dual_is_gauge_invariant(
        inst in instance(1..5),
        raw in prop::collection::vec(0.1..1.0f64, 4),
        p in prop::collection::vec(-1.0..1.0f64, 4),
        alpha in -2.0..2.0f64,
    ) {
        let (mu, theta) = (inst.mu(), inst.theta());
        let n = theta.n_agents();
        let m = shares(n, 1.0, &raw);
        let f = |q: &[f64]| xi_saturated(q, &theta, &mu).unwrap().0 + q.iter().zip(&m).map(|(a, b)| a * b).sum::<f64>();
        let p = &p[..n];
        let shifted: Vec<f64> = p.iter().map(|v| v + alpha).collect();
        prop_assert!((f(p) - f(&shifted)).abs() <= 1e-12);
    }

    #[test]
    fn dominating_utility_keeps_value(
        inst in instance(2..4),
        raw in prop::collection::vec(0.1..1.0f64, 4),
        beta in 1.01..4.0f64,
        bump in prop::collection::vec(0.0..0.5f64, 60),
    ) {
        let mu = inst.mu();
        let rows: Vec<Vec<f64>> = inst.rows.iter().map(|r| r.iter().map(|v| v.abs()).collect()).collect();
        let n = rows.len();
        let spec = CapacitySpec::exact(shares(n, 0.9, &raw)).unwrap();
        let base = solve_prices(&mu, &FieldValues::from_rows(&rows).unwrap(), &spec, None).unwrap();
        let mut up = rows.clone();
        for (x, v) in up[0].iter_mut().enumerate() {
            *v = beta * *v + bump[x];
        }
        let tilde = solve_prices(&mu, &FieldValues::from_rows(&up).unwrap(), &spec, None).unwrap();
        prop_assert!(tilde.values[0] >= (beta - 1.0) * base.values[0] - 1e-8);
    }
}
