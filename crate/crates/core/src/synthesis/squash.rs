//! Squashing every measure onto the great circle of the first two coordinates.

use super::{check_dims, check_horizon, SynthesisReport};
use crate::dynamics::{GateSpec, ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::sphere::UnitVector;

const TIME_MARGIN: f64 = 1.05;

/// Position after the gate `(⟨a,x⟩)₊ P⊥ₓ(−a)` acts for unit time `t`:
/// `u = c/√(1−c²)` decays like `e^{−t}` while the orthogonal part keeps its
/// direction.
fn squash_point(x: &mut [f64], k: usize, sign: f64, t: f64) {
    let c0 = sign * x[k];
    if c0 <= 0.0 {
        return;
    }
    let u = c0 / (1.0 - c0 * c0).sqrt() * (-t).exp();
    let c = u / (1.0 + u * u).sqrt();
    let ratio = (1.0 - c * c).sqrt() / (1.0 - c0 * c0).sqrt();
    for (j, v) in x.iter_mut().enumerate() {
        *v = if j == k { sign * c } else { *v * ratio };
    }
}

/// Unit times of the `2(d−2)` phases that bring every coordinate `k ≥ 3` to at
/// most `target` in absolute value, and the worst distance to the circle.
fn plan(points: &[Vec<f64>], target: f64) -> Result<(Vec<f64>, f64)> {
    let d = points.first().map_or(2, Vec::len);
    let mut pts = points.to_vec();
    let mut times = Vec::new();
    let u_f = target / (1.0 - target * target).sqrt();
    for k in (2..d).rev() {
        for sign in [1.0, -1.0] {
            let mut t: f64 = 0.0;
            for p in &pts {
                let c0 = sign * p[k];
                if 1.0 - c0 * c0 < 1e-12 {
                    return Err(Error::Precondition(format!(
                        "an atom sits at a pole of coordinate {}",
                        k + 1
                    )));
                }
                if c0 > target {
                    t = t.max((c0 / (1.0 - c0 * c0).sqrt() / u_f).ln());
                }
            }
            let t = TIME_MARGIN * t;
            for p in &mut pts {
                squash_point(p, k, sign, t);
            }
            times.push(t);
        }
    }
    let worst = pts
        .iter()
        .map(|p| p[2..].iter().map(|v| v * v).sum::<f64>().sqrt().min(1.0).asin())
        .fold(0.0, f64::max);
    Ok((times, worst))
}

/// For `k = d, …, 3` a pair of opposed gates `(⟨±e_k, x⟩)₊ P⊥ₓ(∓e_k)` drives
/// the k-th coordinate of every atom towards 0, ending within `eps` of the
/// circle spanned by `e₁, e₂`. Uses `2(d−2)` segments of equal length.
pub fn synth_squash_to_circle(measures: &[EmpiricalMeasure], eps: f64, t: f64) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let d = check_dims(measures)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("eps {eps} outside (0, 1)")));
    }
    if d == 2 {
        return Ok(SynthesisReport::identity(d, t, "squash: already on the circle"));
    }
    let points: Vec<Vec<f64>> = measures
        .iter()
        .flat_map(|m| m.support().map(|p| p.as_slice().to_vec()))
        .collect();
    let mut target = eps / (4.0 * (d as f64).sqrt());
    let mut plan_ok = None;
    for _ in 0..=super::MAX_RETRIES {
        let (times, worst) = plan(&points, target)?;
        if worst <= eps {
            plan_ok = Some(times);
            break;
        }
        target /= 2.0;
    }
    let times = plan_ok.ok_or_else(|| Error::synth("squash", "could not reach the circle tolerance"))?;
    let seg = t / times.len() as f64;
    let mut params = Vec::with_capacity(times.len());
    let mut i = 0;
    for k in (2..d).rev() {
        for sign in [1.0, -1.0] {
            let e = UnitVector::basis(d, k);
            let gate = GateSpec {
                a: if sign > 0.0 { e.clone() } else { e.neg() },
                tau: 0.0,
                z: if sign > 0.0 { e.neg() } else { e },
            };
            params.push(TransformerParams::gate(&gate, times[i] / seg));
            i += 1;
        }
    }
    let schedule = ParamSchedule::equal_split(t, params)?;
    let notes = vec![format!(
        "squash: {} phases, coordinate target {target:.3e}, unit times {times:?}",
        times.len()
    )];
    Ok(SynthesisReport::new(schedule, notes))
}
