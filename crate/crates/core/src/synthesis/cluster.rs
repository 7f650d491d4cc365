//! Attention-only clustering of a single measure.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{AttentionMode, ParticleSystem, StepRule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{open_hemisphere_direction, EmpiricalMeasure};
use crate::sphere::angle_between;

/// Run the clustering field until the support diameter drops to `stop_eps`,
/// giving up after `max_time`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub stop_eps: f64,
    pub max_time: f64,
}

/// Outcome of [`cluster_until`].
#[derive(Debug, Clone)]
pub struct ClusterRun {
    /// First step time at which the diameter was at most `stop_eps`.
    pub hitting_time: f64,
    pub measure: EmpiricalMeasure,
    /// `(t, diameter)` after every step, starting with `t = 0`.
    pub diameters: Vec<(f64, f64)>,
}

/// Constant parameters `V = I`, `W = 0`, given `B`, with a stopping rule at
/// diameter `stop_eps`.
pub fn synth_cluster_single(b: &DMatrix<f64>, stop_eps: f64) -> Result<(TransformerParams, StoppingRule)> {
    if b.nrows() != b.ncols() || b.nrows() < 2 {
        return Err(Error::Invalid("B must be a square matrix of size at least 2".into()));
    }
    if !(stop_eps > 0.0 && stop_eps.is_finite()) {
        return Err(Error::Invalid(format!("stop_eps {stop_eps} must be positive")));
    }
    let d = b.nrows();
    let params = TransformerParams::attention(DMatrix::identity(d, d), b.clone());
    Ok((
        params,
        StoppingRule {
            stop_eps,
            max_time: 1e3,
        },
    ))
}

fn flat_diameter(xs: &[f64], weights: &[f64], d: usize) -> f64 {
    let pts: Vec<&[f64]> = xs
        .chunks(d)
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(p, _)| p)
        .collect();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            best = best.max(angle_between(pts[i], pts[j]));
        }
    }
    best
}

/// Integrate the clustering parameters until the stopping rule fires. The
/// support must lie in an open hemisphere.
pub fn cluster_until(
    mu: &EmpiricalMeasure,
    params: &TransformerParams,
    rule: &StoppingRule,
    step: StepRule,
) -> Result<ClusterRun> {
    if open_hemisphere_direction(mu.support()).is_none() {
        return Err(Error::Precondition(
            "support is not contained in an open hemisphere".into(),
        ));
    }
    let d = mu.dim();
    let mut sys = ParticleSystem::new(std::slice::from_ref(mu), AttentionMode::Full)?;
    // The stop test runs once before the first step and once after each step.
    let mut diameters = Vec::new();
    let stop_eps = rule.stop_eps;
    let hit = sys.advance_until(params, rule.max_time, step, |s| {
        let dia = flat_diameter(s.state(0), s.weights(0), d);
        diameters.push((f64::NAN, dia));
        dia <= stop_eps
    })?;
    let hitting_time = hit.ok_or_else(|| {
        Error::synth(
            "cluster",
            format!("diameter above {stop_eps} after time {}", rule.max_time),
        )
    })?;
    // Step times are uniform, so they can be filled in afterwards.
    let steps = diameters.len() - 1;
    let h = if steps > 0 { hitting_time / steps as f64 } else { 0.0 };
    for (k, entry) in diameters.iter_mut().enumerate() {
        entry.0 = k as f64 * h;
    }
    Ok(ClusterRun {
        hitting_time,
        measure: sys.measure(0)?,
        diameters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::UnitVector;

    #[test]
    fn single_atom_hits_immediately() {
        let (p, rule) = synth_cluster_single(&DMatrix::zeros(3, 3), 1e-3).unwrap();
        let mu = EmpiricalMeasure::dirac(UnitVector::basis(3, 0));
        let run = cluster_until(&mu, &p, &rule, StepRule::default()).unwrap();
        assert_eq!(run.hitting_time, 0.0);
        assert_eq!(run.measure, mu);
    }

    #[test]
    fn antipodal_pair_rejected() {
        let (p, rule) = synth_cluster_single(&DMatrix::zeros(3, 3), 1e-3).unwrap();
        let x = UnitVector::basis(3, 0);
        let mu = EmpiricalMeasure::uniform(vec![x.clone(), x.neg()]).unwrap();
        assert!(cluster_until(&mu, &p, &rule, StepRule::default()).is_err());
    }
}
