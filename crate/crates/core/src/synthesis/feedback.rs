//! Feedback separation of measures already squashed onto the circle of the
//! first two coordinates. Experimental.
//!
//! The leader is the measure owning the atom `x⁺` of largest polar angle. With
//! `B = β x⁺x⁺ᵀ` and `V = I` every measure contracts onto its own atom most
//! aligned with `x⁺`, and the perceptron term `(⟨a,x⟩)₊ w(t)` keeps `x⁺` itself
//! fixed. The leader ends as a single atom above everything else, and an atom
//! on the circle is always separable from other circle points.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{check_dims, check_horizon, with_retries, SynthesisReport};
use crate::dynamics::{integrate, AttentionMode, FeedbackLaw, FlowOptions, ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{linearly_separable, EmpiricalMeasure};
use crate::sphere::{angle_between, UnitVector};

/// Contraction time at unit strength, in units of `1/β`.
const UNIT_TIME: f64 = 20.0;

/// The feedback law to integrate with, or nothing when there is nothing to
/// separate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackController {
    pub law: Option<FeedbackLaw>,
}

impl FeedbackController {
    /// Mode to integrate the accompanying schedule in.
    pub fn mode(&self) -> AttentionMode {
        match &self.law {
            Some(l) => AttentionMode::Feedback(l.clone()),
            None => AttentionMode::Full,
        }
    }
}

fn polar(x: &UnitVector) -> f64 {
    x.as_slice()[1].atan2(x.as_slice()[0])
}

/// Build the feedback law and a single `V = I` segment of length `t`.
pub fn synth_feedback_disentangle(
    measures: &[EmpiricalMeasure],
    beta: f64,
    t: f64,
) -> Result<(FeedbackController, SynthesisReport)> {
    check_horizon(t)?;
    let d = check_dims(measures)?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Invalid(format!("beta {beta} must be positive")));
    }
    if measures.len() == 1 {
        return Ok((
            FeedbackController { law: None },
            SynthesisReport::identity(d, t, "feedback: single measure, controller inert"),
        ));
    }
    let angles: Vec<f64> = measures.iter().flat_map(|m| m.support().map(polar)).collect();
    let lo = angles.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = angles.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo >= std::f64::consts::PI {
        return Err(Error::Precondition(
            "circle marginals do not fit in an open half circle".into(),
        ));
    }
    let top = |m: &EmpiricalMeasure| {
        m.support()
            .max_by(|a, b| polar(a).total_cmp(&polar(b)))
            .expect("nonempty")
            .clone()
    };
    let leader = (0..measures.len())
        .max_by(|&i, &j| polar(&top(&measures[i])).total_cmp(&polar(&top(&measures[j]))))
        .expect("nonempty");
    let anchor = top(&measures[leader]);
    let theta_top = polar(&anchor);
    let theta_other = measures
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != leader)
        .flat_map(|(_, m)| m.support().map(polar))
        .fold(f64::NEG_INFINITY, f64::max);
    if theta_top - theta_other < 1e-9 {
        return Err(Error::Precondition(
            "boundary supports overlap: the top atom is shared".into(),
        ));
    }
    let mid = 0.5 * (theta_top + theta_other);
    let mut g = vec![0.0; d];
    g[0] = -mid.sin();
    g[1] = mid.cos();
    let gate = UnitVector::normalize_slice(&g)?;
    let law = FeedbackLaw {
        leader,
        anchor: anchor.clone(),
        gate,
        beta,
    };
    let controller = FeedbackController { law: Some(law) };
    let mode = controller.mode();
    let build = |factor: f64| {
        let v = DMatrix::identity(d, d) * (factor * UNIT_TIME / t);
        ParamSchedule::from_durations(vec![(t, TransformerParams::attention(v, DMatrix::zeros(d, d)))])
    };
    let mut drift = 0.0;
    let schedule = with_retries("feedback", build, |s| {
        let out = integrate(measures, s, &mode, &FlowOptions::default())?.measures;
        let lead = &out[leader];
        drift = lead
            .support()
            .map(|p| angle_between(p.as_slice(), anchor.as_slice()))
            .fold(f64::INFINITY, f64::min);
        Ok(out
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != leader)
            .all(|(_, m)| linearly_separable(lead, m).is_some()))
    })?;
    let notes = vec![format!(
        "feedback: leader {leader}, anchor angle {theta_top:.6}, gate angle {mid:.6}, beta {beta}, anchor drift {drift:.3e}"
    )];
    Ok((controller, SynthesisReport::new(schedule, notes)))
}
