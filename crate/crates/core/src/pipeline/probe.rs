//! Empirical probe of where independently sampled clouds cluster.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::StepRule;
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::sphere::{angle_between, random_in_cap, UnitVector};
use crate::synthesis::{cluster_until, mean_direction, synth_cluster_single};

/// Support diameter at which a cloud counts as clustered.
const LIMIT_DIAMETER: f64 = 1e-6;
/// Limit points closer than this coincide.
const COINCIDENCE: f64 = 1e-3;
/// Clouds are sampled in a cap of this radius, inside an open hemisphere.
const CLOUD_RADIUS: f64 = 1.2;

/// Coincidences among the limit points of `N` clouds per trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub trials: usize,
    pub pairs: usize,
    pub coincidences: usize,
    /// `coincidences / pairs`, absent when no pair was compared.
    pub frequency: Option<f64>,
    /// Smallest geodesic distance between two limit points of one trial.
    pub min_separation: Option<f64>,
    pub max_hitting_time: f64,
}

/// Sample `big_n` clouds of `n` atoms per trial, each uniform in a cap of
/// radius 1.2 around a uniform center, cluster each with `V = I`, `B = βI`
/// to diameter 1e-6 and count pairs of limit points closer than 1e-3.
/// Trial `k` uses the stream `seed + k`, so results do not depend on the
/// thread count.
pub fn probe_generic_limits(
    n: usize,
    big_n: usize,
    d: usize,
    beta: f64,
    trials: usize,
    seed: u64,
) -> Result<ProbeStats> {
    if d < 3 {
        return Err(Error::Precondition(format!("generic limits are probed for d ≥ 3, got {d}")));
    }
    if n == 0 || big_n == 0 {
        return Err(Error::Invalid("clouds need at least one atom and one measure".into()));
    }
    let (params, rule) = synth_cluster_single(&(DMatrix::identity(d, d) * beta), LIMIT_DIAMETER)?;
    let runs = (0..trials)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let mut limits = Vec::with_capacity(big_n);
            let mut hit: f64 = 0.0;
            for _ in 0..big_n {
                let center = UnitVector::random(&mut rng, d);
                let pts = (0..n).map(|_| random_in_cap(&mut rng, &center, CLOUD_RADIUS)).collect();
                let mu = EmpiricalMeasure::uniform(pts)?;
                let run = cluster_until(&mu, &params, &rule, StepRule::default())?;
                hit = hit.max(run.hitting_time);
                limits.push(mean_direction(&run.measure)?);
            }
            let mut seps = Vec::new();
            for i in 0..big_n {
                for j in i + 1..big_n {
                    seps.push(angle_between(limits[i].as_slice(), limits[j].as_slice()));
                }
            }
            Ok((seps, hit))
        })
        .collect::<Result<Vec<_>>>()?;
    let seps: Vec<f64> = runs.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    let coincidences = seps.iter().filter(|s| **s < COINCIDENCE).count();
    Ok(ProbeStats {
        trials,
        pairs: seps.len(),
        coincidences,
        frequency: (!seps.is_empty()).then(|| coincidences as f64 / seps.len() as f64),
        min_separation: seps.iter().cloned().reduce(f64::min),
        max_hitting_time: runs.iter().map(|(_, h)| *h).fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_trials_give_empty_statistics() {
        let s = probe_generic_limits(8, 4, 3, 1.0, 0, 0).unwrap();
        assert_eq!(s.pairs, 0);
        assert!(s.frequency.is_none());
    }

    #[test]
    fn circle_rejected() {
        assert!(probe_generic_limits(8, 4, 2, 1.0, 1, 0).is_err());
    }
}
