//! Shared fixtures for the benchmarks.

use attnflow_core::sphere::random_in_cap;
use attnflow_core::{EmpiricalMeasure, UnitVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` uniform atoms in a cap of radius `radius` around a random center.
pub fn cloud(seed: u64, d: usize, n: usize, radius: f64) -> EmpiricalMeasure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = UnitVector::random(&mut rng, d);
    EmpiricalMeasure::uniform((0..n).map(|_| random_in_cap(&mut rng, &c, radius)).collect())
        .expect("a nonempty cloud")
}
