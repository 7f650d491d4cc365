//! The Transformer vector field, parameter schedules and numerical flows.

mod field;
mod integrate;
mod params;

pub use field::{attention, attention_weights, vector_field, AttentionMode, FeedbackLaw};
pub use integrate::{
    integrate, Diagnostics, Direction, FlowMap, FlowOptions, FlowResult, ParticleSystem, Sample,
    StepRecord, StepRule, Trajectory,
};
pub use params::{operator_norm, GateSpec, ParamSchedule, Segment, TransformerParams};
