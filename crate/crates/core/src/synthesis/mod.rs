//! Explicit piecewise-constant parameter schedules for clustering, moving mass
//! between caps, separating measures and matching points.
//!
//! Every construction picks the direction of each field in closed form and
//! sets its strength from hitting times: the time a point driven by a gated
//! drift needs to travel along its geodesic is computed by quadrature, and the
//! field is scaled so the required time fits the segment budget. All schedules
//! run in [`AttentionMode::Full`](crate::dynamics::AttentionMode::Full); where a
//! mean-field segment is needed `B = 0`, which for probability weights is the
//! same field as the mean mode.

mod balls;
mod cluster;
mod compression;
mod feedback;
mod interpolation;
mod orthant;
mod separation;
mod squash;
mod travel;

use serde::{Deserialize, Serialize};

use crate::dynamics::{integrate, AttentionMode, FlowOptions, ParamSchedule};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;

pub use balls::{synth_tubular_chain, synth_two_balls, two_balls_time};
pub use cluster::{cluster_until, synth_cluster_single, ClusterRun, StoppingRule};
pub use compression::{synth_compression, AnchorTarget};
pub use feedback::{synth_feedback_disentangle, FeedbackController};
pub use interpolation::{synth_point_match, PairPlan};
pub use orthant::synth_orthant_transport;
pub use separation::{
    synth_barycenter_isolation, synth_decolinearize, synth_disentangle, IsolationOptions,
};
pub use squash::synth_squash_to_circle;
pub use travel::{gate_travel_time, hitting_angle};

pub(crate) use interpolation::match_blobs;
pub(crate) use separation::{mean_direction, pairwise_separated, same_measure};

/// A synthesized schedule with the quantities the bounds are stated in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub schedule: ParamSchedule,
    pub switch_count: usize,
    pub param_norm: f64,
    /// Human-readable trace of the choices made (anchors, caps, gates, times).
    pub notes: Vec<String>,
}

impl SynthesisReport {
    pub fn new(schedule: ParamSchedule, notes: Vec<String>) -> Self {
        Self {
            switch_count: schedule.switch_count(),
            param_norm: schedule.param_norm(),
            schedule,
            notes,
        }
    }

    pub fn identity(d: usize, horizon: f64, note: impl Into<String>) -> Self {
        Self::new(ParamSchedule::identity(d, horizon), vec![note.into()])
    }

    /// Run the stages one after another; the horizons add up.
    pub fn sequence(stages: Vec<SynthesisReport>, horizon: f64) -> Result<Self> {
        let mut notes = Vec::new();
        let mut schedules = Vec::new();
        for s in stages {
            notes.extend(s.notes);
            schedules.push(s.schedule);
        }
        let schedule = ParamSchedule::chain(&schedules)
            .ok_or_else(|| Error::Invalid("no stages to sequence".into()))?
            .with_horizon(horizon)?;
        Ok(Self::new(schedule, notes))
    }
}

/// Integrate measures through a schedule in full mode with default numerics.
pub fn flow(measures: &[EmpiricalMeasure], schedule: &ParamSchedule) -> Result<Vec<EmpiricalMeasure>> {
    Ok(integrate(measures, schedule, &AttentionMode::Full, &FlowOptions::default())?.measures)
}

/// Positive horizon check shared by every construction.
pub(crate) fn check_horizon(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("horizon {t} must be positive and finite")))
    }
}

pub(crate) fn check_dims(measures: &[EmpiricalMeasure]) -> Result<usize> {
    let d = measures
        .first()
        .map(EmpiricalMeasure::dim)
        .ok_or_else(|| Error::Invalid("no measures given".into()))?;
    if let Some(m) = measures.iter().find(|m| m.dim() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: m.dim(),
        });
    }
    Ok(d)
}

/// Number of times a stage is rebuilt with doubled field strength when its
/// measured outcome misses the target.
pub(crate) const MAX_RETRIES: usize = 8;

/// Build a stage with strength factor 1, 2, 4, … until `accept` holds.
pub(crate) fn with_retries<T>(
    stage: &str,
    mut build: impl FnMut(f64) -> Result<T>,
    mut accept: impl FnMut(&T) -> Result<bool>,
) -> Result<T> {
    let mut factor = 1.0;
    for _ in 0..=MAX_RETRIES {
        let candidate = build(factor)?;
        if accept(&candidate)? {
            return Ok(candidate);
        }
        factor *= 2.0;
    }
    Err(Error::synth(
        stage,
        format!("target not reached after {MAX_RETRIES} strength doublings"),
    ))
}
