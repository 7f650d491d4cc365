//! Transport of every measure into the open positive orthant.

use nalgebra::DVector;
use std::f64::consts::PI;

use super::{check_dims, check_horizon, flow, with_retries, SynthesisReport};
use crate::dynamics::{ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{in_open_orthant, EmpiricalMeasure};
use crate::sphere::{angle_between, UnitVector};

const TIME_MARGIN: f64 = 1.05;
/// Radius of the cap around `−hole` that the first phase gathers mass into.
const GATHER_RADIUS: f64 = PI / 8.0;

/// Orthant point whose antipode is farthest from the gathering cap around
/// `−hole`, among `𝟙/√d` and `normalize(0.2𝟙 + e_k)`.
fn orthant_target(hole: &UnitVector) -> UnitVector {
    let d = hole.dim();
    let mut candidates = vec![UnitVector::normalize(DVector::from_element(d, 1.0)).expect("nonzero")];
    for k in 0..d {
        let mut v = DVector::from_element(d, 0.2);
        v[k] += 1.0;
        candidates.push(UnitVector::normalize(v).expect("nonzero"));
    }
    candidates
        .into_iter()
        .max_by(|a, b| {
            angle_between(a.as_slice(), hole.as_slice()).total_cmp(&angle_between(b.as_slice(), hole.as_slice()))
        })
        .expect("at least one candidate")
}

/// Two constant drifts with one switch: `W₁𝟙 ∝ −hole` gathers all mass into a
/// cap around `−hole`, then `W₂𝟙 ∝ α` for an orthant point `α` whose antipode is
/// outside that cap moves everything into a cap around `α` inside the open
/// positive orthant. Field strengths scale as `1/T`.
pub fn synth_orthant_transport(
    measures: &[EmpiricalMeasure],
    hole: &UnitVector,
    t: f64,
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let d = check_dims(measures)?;
    if hole.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: hole.dim(),
        });
    }
    let mut c_max = -1.0f64;
    for mu in measures {
        for p in mu.support() {
            if angle_between(p.as_slice(), hole.as_slice()) < 1e-9 {
                return Err(Error::Precondition("hole coincides with an atom".into()));
            }
            c_max = c_max.max(p.dot(hole));
        }
    }
    let t1 = (GATHER_RADIUS.cos().atanh() + c_max.atanh()).max(0.0);
    let alpha = orthant_target(hole);
    let sep = angle_between(alpha.as_slice(), hole.as_slice());
    if sep <= GATHER_RADIUS + 1e-6 {
        return Err(Error::synth("orthant", "no orthant target clears the gathering cap"));
    }
    let phi_max = PI - (sep - GATHER_RADIUS);
    let min_coord = alpha.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
    let r_final = 0.5 * min_coord.asin();
    let t2 = ((phi_max / 2.0).tan() / (r_final / 2.0).tan()).ln().max(0.0);
    let half = t / 2.0;
    let minus_hole = -hole.as_vector();
    let build = |factor: f64| {
        let s1 = factor * TIME_MARGIN * t1 / half;
        let s2 = factor * TIME_MARGIN * t2 / half;
        ParamSchedule::from_durations(vec![
            (half, TransformerParams::constant_drift(&minus_hole, s1)),
            (half, TransformerParams::constant_drift(alpha.as_vector(), s2)),
        ])?
        .with_horizon(t)
    };
    let schedule = with_retries("orthant", build, |s| {
        Ok(flow(measures, s)?.iter().all(in_open_orthant))
    })?;
    let notes = vec![format!(
        "orthant: hole {:?}, target {:?}, unit times {t1:.6} and {t2:.6}, final cap radius {r_final:.4}",
        hole.as_slice(),
        alpha.as_slice()
    )];
    Ok(SynthesisReport::new(schedule, notes))
}
