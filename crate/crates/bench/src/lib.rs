//! Fixtures shared by the benchmarks.

use fedtee_core::params::ParameterVector;
use fedtee_core::seeds::rng_from_seed;
use rand::Rng;

/// `n` random updates of dimension `dim`, deterministic in `seed`.
pub fn random_updates(seed: u64, n: usize, dim: usize) -> Vec<ParameterVector> {
    let mut rng = rng_from_seed(seed);
    (0..n)
        .map(|_| ParameterVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}
