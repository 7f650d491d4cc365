//! RK4 integration of the continuity equation on the sphere.
//!
//! Every measure is a set of weighted particles; each RK4 stage evaluates the
//! field at the stage points of all particles, then the new state is
//! renormalized onto the sphere. Sums over particles are exact fixed-point
//! reductions, so results depend neither on atom order nor on thread count.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::field::{dot, lipschitz_bound, AttentionMode, Kernel};
use super::params::{ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::sphere::UnitVector;

/// How many substeps each segment is cut into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepRule {
    /// Substeps of at most `h`; `h` may not exceed the shortest segment.
    Fixed { h: f64 },
    /// At most `rel` of the segment length and at most `abs_max` in time, and
    /// small enough that `h · L ≤ dyn_step` for the segment's Lipschitz bound `L`.
    Auto { rel: f64, abs_max: f64, dyn_step: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Auto {
            rel: 1e-3,
            abs_max: 1e-2,
            dyn_step: 0.05,
        }
    }
}

impl StepRule {
    pub fn fixed(h: f64) -> Self {
        StepRule::Fixed { h }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            StepRule::Fixed { h } => h.is_finite() && h > 0.0,
            StepRule::Auto {
                rel,
                abs_max,
                dyn_step,
            } => [rel, abs_max, dyn_step].iter().all(|v| v.is_finite() && *v > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid step rule {self:?}")))
        }
    }

    /// Number of substeps for a segment of length `len` with Lipschitz bound `lip`.
    pub fn substeps(&self, len: f64, lip: f64) -> usize {
        let n = match *self {
            StepRule::Fixed { h } => (len / h - 1e-9).ceil(),
            StepRule::Auto {
                rel,
                abs_max,
                dyn_step,
            } => {
                if lip == 0.0 {
                    1.0
                } else {
                    (len / (rel * len).min(abs_max))
                        .ceil()
                        .max((len * lip / dyn_step).ceil())
                }
            }
        };
        (n as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Forward,
    /// Run the segments in reverse with the negated field, undoing a forward run.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlowOptions {
    pub step: StepRule,
    pub direction: Direction,
    /// Keep every `stride`-th state, plus the initial and final ones.
    pub stride: Option<usize>,
    /// Keep per-step tangency and norm drift records.
    pub record_steps: bool,
}

impl FlowOptions {
    pub fn with_step(step: StepRule) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }
}

/// Per-step numerical health.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub segment: usize,
    pub t: f64,
    pub h: f64,
    /// Largest `|⟨F(x), x⟩|` at the first stage.
    pub tangency: f64,
    /// Largest `| |x| − 1 |` before renormalization.
    pub norm_drift: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub max_tangency: f64,
    pub max_norm_drift: f64,
    pub records: Vec<StepRecord>,
}

impl Diagnostics {
    fn absorb(&mut self, rec: StepRecord, keep: bool) {
        self.steps += 1;
        self.max_tangency = self.max_tangency.max(rec.tangency);
        self.max_norm_drift = self.max_norm_drift.max(rec.norm_drift);
        if keep {
            self.records.push(rec);
        }
    }
}

/// Particle positions of every measure at one time, flattened row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub weights: Vec<Vec<f64>>,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    /// Measure `i` at sample `k`.
    pub fn measure(&self, k: usize, i: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_flat(self.dim, &self.samples[k].states[i], self.weights[i].clone())
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult {
    pub measures: Vec<EmpiricalMeasure>,
    pub trajectory: Option<Trajectory>,
    pub diagnostics: Diagnostics,
}

/// Mutable particle state of a family of measures evolving under one shared
/// parameter path.
#[derive(Debug, Clone)]
pub struct ParticleSystem {
    d: usize,
    states: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    mode: AttentionMode,
    k: [Vec<Vec<f64>>; 4],
    stage: Vec<Vec<f64>>,
}

pub(crate) struct PreparedSegment {
    kernel: Kernel,
    lipschitz: f64,
    v: DMatrix<f64>,
}

impl PreparedSegment {
    pub(crate) fn new(params: &TransformerParams, mode: &AttentionMode) -> Result<Self> {
        Ok(Self {
            kernel: Kernel::new(params, mode)?,
            lipschitz: lipschitz_bound(params, mode),
            v: params.v.clone(),
        })
    }
}

impl ParticleSystem {
    pub fn new(measures: &[EmpiricalMeasure], mode: AttentionMode) -> Result<Self> {
        let first = measures
            .first()
            .ok_or_else(|| Error::Invalid("no measures to integrate".into()))?;
        let d = first.dim();
        if let Some(m) = measures.iter().find(|m| m.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: m.dim(),
            });
        }
        if let AttentionMode::Feedback(law) = &mode {
            if law.leader >= measures.len() {
                return Err(Error::Invalid(format!(
                    "feedback leader {} out of range for {} measures",
                    law.leader,
                    measures.len()
                )));
            }
        }
        let states: Vec<Vec<f64>> = measures.iter().map(EmpiricalMeasure::flat).collect();
        let zeros: Vec<Vec<f64>> = states.iter().map(|s| vec![0.0; s.len()]).collect();
        Ok(Self {
            d,
            weights: measures.iter().map(|m| m.weights().to_vec()).collect(),
            mode,
            k: [zeros.clone(), zeros.clone(), zeros.clone(), zeros.clone()],
            stage: zeros,
            states,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn mode(&self) -> &AttentionMode {
        &self.mode
    }

    /// Flattened positions of measure `i`.
    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i]
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// Position of particle `j` of measure `i`.
    pub fn point(&self, i: usize, j: usize) -> &[f64] {
        &self.states[i][j * self.d..(j + 1) * self.d]
    }

    pub fn measure(&self, i: usize) -> Result<EmpiricalMeasure> {
        EmpiricalMeasure::from_flat(self.d, &self.states[i], self.weights[i].clone())
    }

    pub fn measures(&self) -> Result<Vec<EmpiricalMeasure>> {
        (0..self.states.len()).map(|i| self.measure(i)).collect()
    }

    fn eval(&mut self, seg: &PreparedSegment, which: usize, from_stage: bool, sign: f64) -> Result<()> {
        let src = if from_stage { &self.stage } else { &self.states };
        let fb = match &self.mode {
            AttentionMode::Feedback(law) => Some(law.drift(&seg.v, &src[law.leader], &self.weights[law.leader])?),
            _ => None,
        };
        for (i, out) in self.k[which].iter_mut().enumerate() {
            seg.kernel
                .eval_measure(&src[i], &self.weights[i], fb.as_deref(), sign, out);
        }
        Ok(())
    }

    fn set_stage(&mut self, which: usize, c: f64) {
        for ((st, x), k) in self.stage.iter_mut().zip(&self.states).zip(&self.k[which]) {
            for ((s, xv), kv) in st.iter_mut().zip(x).zip(k) {
                *s = xv + c * kv;
            }
        }
    }

    /// One RK4 step of size `h` with the field multiplied by `sign`.
    /// Returns `(tangency, norm_drift)`.
    fn rk4(&mut self, seg: &PreparedSegment, h: f64, sign: f64) -> Result<(f64, f64)> {
        if seg.kernel.is_zero() {
            return Ok((0.0, 0.0));
        }
        let d = self.d;
        self.eval(seg, 0, false, sign)?;
        let mut tangency: f64 = 0.0;
        for (x, k) in self.states.iter().zip(&self.k[0]) {
            for (xp, kp) in x.chunks(d).zip(k.chunks(d)) {
                tangency = tangency.max(dot(xp, kp).abs());
            }
        }
        self.set_stage(0, 0.5 * h);
        self.eval(seg, 1, true, sign)?;
        self.set_stage(1, 0.5 * h);
        self.eval(seg, 2, true, sign)?;
        self.set_stage(2, h);
        self.eval(seg, 3, true, sign)?;
        let mut drift: f64 = 0.0;
        let mut finite = true;
        let [k1, k2, k3, k4] = &self.k;
        for (i, x) in self.states.iter_mut().enumerate() {
            for (p, chunk) in x.chunks_mut(d).enumerate() {
                let base = p * d;
                for (c, v) in chunk.iter_mut().enumerate() {
                    let j = base + c;
                    *v += h / 6.0 * (k1[i][j] + 2.0 * k2[i][j] + 2.0 * k3[i][j] + k4[i][j]);
                }
                let n = dot(chunk, chunk).sqrt();
                finite &= n.is_finite() && n > 0.0;
                drift = drift.max((n - 1.0).abs());
                chunk.iter_mut().for_each(|v| *v /= n);
            }
        }
        if !finite {
            return Err(Error::Integration {
                segment: 0,
                time: 0.0,
                reason: "non-finite state".into(),
            });
        }
        Ok((tangency, drift))
    }

    /// Flow for `duration` under constant parameters.
    pub fn advance(
        &mut self,
        params: &TransformerParams,
        duration: f64,
        step: StepRule,
    ) -> Result<Diagnostics> {
        let mut diag = Diagnostics::default();
        self.run(params, duration, step, |_, _| false, &mut diag)?;
        Ok(diag)
    }

    /// Flow under constant parameters until `stop` holds after a step or
    /// `max_time` elapses. Returns the time at which `stop` first held.
    /// Negative `max_time` runs the negated field.
    pub fn advance_until(
        &mut self,
        params: &TransformerParams,
        max_time: f64,
        step: StepRule,
        mut stop: impl FnMut(&ParticleSystem) -> bool,
    ) -> Result<Option<f64>> {
        if stop(self) {
            return Ok(Some(0.0));
        }
        let mut diag = Diagnostics::default();
        self.run(params, max_time, step, |s, _| stop(s), &mut diag)
    }

    fn run(
        &mut self,
        params: &TransformerParams,
        duration: f64,
        step: StepRule,
        mut stop: impl FnMut(&ParticleSystem, f64) -> bool,
        diag: &mut Diagnostics,
    ) -> Result<Option<f64>> {
        step.check()?;
        if params.dim() != self.d {
            return Err(Error::Dimension {
                expected: self.d,
                found: params.dim(),
            });
        }
        let len = duration.abs();
        if len == 0.0 {
            return Ok(None);
        }
        let sign = duration.signum();
        let seg = PreparedSegment::new(params, &self.mode)?;
        let n = step.substeps(len, seg.lipschitz);
        let h = len / n as f64;
        for s in 0..n {
            let t = (s + 1) as f64 * h;
            let (tangency, norm_drift) = self.rk4(&seg, h, sign).map_err(|e| locate(e, 0, t))?;
            diag.absorb(
                StepRecord {
                    segment: 0,
                    t,
                    h,
                    tangency,
                    norm_drift,
                },
                false,
            );
            if stop(self, t) {
                return Ok(Some(t));
            }
        }
        Ok(None)
    }
}

fn locate(e: Error, segment: usize, time: f64) -> Error {
    match e {
        Error::Integration { reason, .. } => Error::Integration {
            segment,
            time,
            reason,
        },
        other => other,
    }
}

/// Integrate the measures through the whole schedule.
pub fn integrate(
    measures: &[EmpiricalMeasure],
    schedule: &ParamSchedule,
    mode: &AttentionMode,
    opts: &FlowOptions,
) -> Result<FlowResult> {
    schedule.check()?;
    opts.step.check()?;
    let mut sys = ParticleSystem::new(measures, mode.clone())?;
    if schedule.dim() != sys.d {
        return Err(Error::Dimension {
            expected: sys.d,
            found: schedule.dim(),
        });
    }
    if let StepRule::Fixed { h } = opts.step {
        let shortest = schedule.shortest_segment();
        if h > shortest + 1e-12 {
            return Err(Error::Invalid(format!(
                "step {h} exceeds the shortest segment {shortest}"
            )));
        }
    }
    if opts.stride == Some(0) {
        return Err(Error::Invalid("stride must be positive".into()));
    }
    let backward = opts.direction == Direction::Backward;
    let sign = if backward { -1.0 } else { 1.0 };
    let mut diag = Diagnostics::default();
    let mut samples = Vec::new();
    let t0 = if backward { schedule.horizon } else { 0.0 };
    if opts.stride.is_some() {
        samples.push(Sample {
            t: t0,
            states: sys.states.clone(),
        });
    }
    let order: Vec<usize> = if backward {
        (0..schedule.segments.len()).rev().collect()
    } else {
        (0..schedule.segments.len()).collect()
    };
    let mut count = 0usize;
    let mut last_sampled = 0usize;
    let mut t = t0;
    for idx in order {
        let segment = &schedule.segments[idx];
        let prepared = PreparedSegment::new(&segment.params, mode)?;
        let len = segment.duration();
        let n = opts.step.substeps(len, prepared.lipschitz);
        let h = len / n as f64;
        let (start, dir) = if backward {
            (segment.t_end, -1.0)
        } else {
            (segment.t_start, 1.0)
        };
        for s in 0..n {
            t = if s + 1 == n {
                start + dir * len
            } else {
                start + dir * (s + 1) as f64 * h
            };
            let (tangency, norm_drift) = sys
                .rk4(&prepared, h, sign)
                .map_err(|e| locate(e, idx, t))?;
            diag.absorb(
                StepRecord {
                    segment: idx,
                    t,
                    h,
                    tangency,
                    norm_drift,
                },
                opts.record_steps,
            );
            count += 1;
            if let Some(stride) = opts.stride {
                if count % stride == 0 {
                    samples.push(Sample {
                        t,
                        states: sys.states.clone(),
                    });
                    last_sampled = count;
                }
            }
        }
    }
    if opts.stride.is_some() && last_sampled != count {
        samples.push(Sample {
            t,
            states: sys.states.clone(),
        });
    }
    let trajectory = opts.stride.map(|_| Trajectory {
        dim: sys.d,
        weights: sys.weights.clone(),
        samples,
    });
    Ok(FlowResult {
        measures: sys.measures()?,
        trajectory,
        diagnostics: diag,
    })
}

/// The flow map of a perceptron-only schedule, a diffeomorphism of the sphere
/// that does not depend on the measure being transported.
#[derive(Debug, Clone)]
pub struct FlowMap {
    schedule: ParamSchedule,
    step: StepRule,
}

impl FlowMap {
    pub fn new(schedule: ParamSchedule, step: StepRule) -> Result<Self> {
        schedule.check()?;
        step.check()?;
        if !schedule.is_perceptron_only() {
            return Err(Error::Invalid(
                "flow maps need V = 0 on every segment".into(),
            ));
        }
        Ok(Self { schedule, step })
    }

    pub fn schedule(&self) -> &ParamSchedule {
        &self.schedule
    }

    fn run(&self, xs: &[UnitVector], direction: Direction) -> Result<Vec<UnitVector>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mu = EmpiricalMeasure::uniform(xs.to_vec())?;
        let opts = FlowOptions {
            step: self.step,
            direction,
            ..FlowOptions::default()
        };
        let out = integrate(&[mu], &self.schedule, &AttentionMode::Full, &opts)?;
        Ok(out.measures[0].points().to_vec())
    }

    pub fn apply(&self, x: &UnitVector) -> Result<UnitVector> {
        Ok(self.run(std::slice::from_ref(x), Direction::Forward)?.remove(0))
    }

    pub fn apply_inverse(&self, x: &UnitVector) -> Result<UnitVector> {
        Ok(self.run(std::slice::from_ref(x), Direction::Backward)?.remove(0))
    }

    pub fn apply_all(&self, xs: &[UnitVector]) -> Result<Vec<UnitVector>> {
        self.run(xs, Direction::Forward)
    }

    pub fn apply_inverse_all(&self, xs: &[UnitVector]) -> Result<Vec<UnitVector>> {
        self.run(xs, Direction::Backward)
    }

    pub fn pushforward(&self, mu: &EmpiricalMeasure) -> Result<EmpiricalMeasure> {
        mu.with_points(self.apply_all(mu.points())?)
    }
}
