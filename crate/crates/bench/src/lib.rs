//! Seeded random instances shared by the benchmarks in benches/.

use partrans::games::CoalitionGame;
use partrans::{DiscreteMeasure, FieldValues};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n x m` matrix with entries uniform in `[0, 1)`.
pub fn matrix(rng: &mut impl Rng, n: usize, m: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..m).map(|_| rng.gen()).collect()).collect()
}

/// Atoms on `[0, 1]` with random weights summing to `total`.
pub fn measure(rng: &mut impl Rng, n: usize, total: f64) -> DiscreteMeasure {
    let points: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.gen()]).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w * total / s).collect();
    DiscreteMeasure::new(1, points, weights).expect("valid measure")
}

/// Random utilities for `agents` agents over the atoms of `mu`.
pub fn field(rng: &mut impl Rng, agents: usize, mu: &DiscreteMeasure) -> FieldValues {
    FieldValues::from_rows(&matrix(rng, agents, mu.len())).expect("valid field")
}

/// Game with `nu(J)` drawn uniformly up to `|J|`.
pub fn game(rng: &mut impl Rng, n: usize) -> CoalitionGame {
    let draws: Vec<f64> = (0..1u32 << n).map(|_| rng.gen()).collect();
    CoalitionGame::from_fn(n, |mask| draws[mask as usize] * mask.count_ones() as f64).expect("valid game")
}
