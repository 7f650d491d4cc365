//! End-to-end matching of input measures to target measures.
//!
//! Each stage is synthesized on the measures it will actually see: the
//! previous stages are integrated first. The stage schedules are then chained
//! into one schedule on `[0, T]`, and the final errors come from a single
//! integration of that schedule from the inputs.

mod probe;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ParamSchedule, StepRule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{
    assignment, in_open_orthant, open_hemisphere_direction, support_diameter, wasserstein2, EmpiricalMeasure,
};
use crate::sphere::{angle_between, UnitVector};
use crate::synthesis::{
    cluster_until, flow, match_blobs, mean_direction, pairwise_separated, same_measure, synth_cluster_single,
    synth_compression, synth_disentangle, synth_orthant_transport, synth_point_match, with_retries, AnchorTarget,
    SynthesisReport,
};
use crate::tolerances;

pub use probe::{probe_generic_limits, ProbeStats};

const TIME_MARGIN: f64 = 1.05;
/// Candidates drawn when looking for a point off every support.
const HOLE_CANDIDATES: usize = 10_000;

/// Which composition of stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Every target is a single atom.
    Points,
    /// Every target has the same number `M` of equally weighted atoms.
    Restricted,
    /// Each target has as many atoms as its input.
    General,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Points => "points",
            MatchMode::Restricted => "restricted",
            MatchMode::General => "general",
        })
    }
}

impl FromStr for MatchMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "points" => Ok(MatchMode::Points),
            "restricted" => Ok(MatchMode::Restricted),
            "general" => Ok(MatchMode::General),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?} (expected points, restricted or general)"
            ))),
        }
    }
}

/// Input and target measures with the accuracy and time budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dimension: usize,
    pub inputs: Vec<EmpiricalMeasure>,
    pub targets: Vec<EmpiricalMeasure>,
    pub eps: f64,
    pub horizon: f64,
    pub mode: MatchMode,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioSpec {
    /// Check the invariants of the data and the preconditions of the mode.
    pub fn validate(&self) -> Result<()> {
        self.validate_data()?;
        match self.mode {
            MatchMode::Points => point_targets(&self.targets).map(|_| ()),
            MatchMode::Restricted => restricted_atoms(&self.targets).map(|_| ()),
            MatchMode::General => transport_maps(&self.inputs, &self.targets).map(|_| ()),
        }
    }

    /// Check everything except the preconditions of the mode.
    pub fn validate_data(&self) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::Invalid("at least one input measure is needed".into()));
        }
        if self.targets.len() != n {
            return Err(Error::Invalid(format!(
                "{n} inputs but {} targets",
                self.targets.len()
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Invalid(format!("seed {} exceeds 2^63 - 1", self.seed)));
        }
        if self.dimension < 2 {
            return Err(Error::Invalid(format!("dimension {} < 2", self.dimension)));
        }
        for (kind, list) in [("input", &self.inputs), ("target", &self.targets)] {
            for (i, m) in list.iter().enumerate() {
                if m.dim() != self.dimension {
                    return Err(Error::Invalid(format!(
                        "{kind} {i} lives in dimension {}, not {}",
                        m.dim(),
                        self.dimension
                    )));
                }
            }
            for i in 0..n {
                for j in i + 1..n {
                    if same_measure(&list[i], &list[j]) {
                        return Err(Error::Precondition(format!("{kind}s {i} and {j} are identical")));
                    }
                }
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Invalid(format!("eps {} must be positive", self.eps)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid(format!("horizon {} must be positive", self.horizon)));
        }
        Ok(())
    }
}

/// One stage of a composed schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub t_start: f64,
    pub t_end: f64,
    /// Segment indices `[first, last)` in the composed schedule.
    pub segments: (usize, usize),
    pub switch_count: usize,
    pub param_norm: f64,
    /// Wall-clock synthesis time in seconds.
    pub synth_seconds: f64,
    pub notes: Vec<String>,
}

/// Outcome of a pipeline: the composed schedule and its verified errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub mode: MatchMode,
    pub eps: f64,
    pub horizon: f64,
    /// `W₂(μⁱ(T), νⁱ)` for every measure.
    pub errors: Vec<f64>,
    pub switch_count: usize,
    pub param_norm: f64,
    pub stages: Vec<StageReport>,
    pub schedule: ParamSchedule,
    /// `‖ψ − ψ_realized‖_{L²(μⁱ)}` for the intended atom bijection, when there is one.
    pub monge_bounds: Option<Vec<f64>>,
    /// Largest atom displacement of the targets after the target
    /// disentanglement and its reversal.
    pub reversal_error: Option<f64>,
    /// Final error divided by the error just before the reversed target
    /// stage: how much that reversal amplifies errors.
    pub amplification: Option<f64>,
    pub notes: Vec<String>,
}

impl MatchReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().cloned().fold(0.0, f64::max)
    }

    /// The schedule of stage `k` on its own, shifted to start at 0.
    pub fn stage_schedule(&self, k: usize) -> Result<ParamSchedule> {
        let s = self
            .stages
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("no stage {k}")))?;
        let pieces = self.schedule.segments[s.segments.0..s.segments.1]
            .iter()
            .map(|seg| (seg.duration(), seg.params.clone()))
            .collect();
        ParamSchedule::from_durations(pieces)
    }
}

/// Run the pipeline selected by `spec.mode`.
pub fn run_pipeline(spec: &ScenarioSpec) -> Result<MatchReport> {
    match spec.mode {
        MatchMode::Points => match_point_targets(spec),
        MatchMode::Restricted => match_restricted(spec),
        MatchMode::General => match_general_empirical(spec),
    }
}

/// Stage schedules collected in order, with the measures they lead to.
struct Composer {
    d: usize,
    slot: f64,
    current: Vec<EmpiricalMeasure>,
    parts: Vec<(String, SynthesisReport, f64)>,
}

impl Composer {
    fn new(inputs: &[EmpiricalMeasure], slot: f64) -> Self {
        Self {
            d: inputs[0].dim(),
            slot,
            current: inputs.to_vec(),
            parts: Vec::new(),
        }
    }

    /// Synthesize a stage from the current measures and flow them through it.
    fn stage(
        &mut self,
        name: &str,
        build: impl FnOnce(&[EmpiricalMeasure], f64) -> Result<SynthesisReport>,
    ) -> Result<()> {
        let start = Instant::now();
        let report = build(&self.current, self.slot).map_err(|e| e.in_stage(name))?;
        if !report.schedule.is_identity() {
            self.current = flow(&self.current, &report.schedule).map_err(|e| e.in_stage(name))?;
        }
        self.parts.push((name.to_string(), report, start.elapsed().as_secs_f64()));
        Ok(())
    }

    fn skip(&mut self, name: &str, why: &str) {
        let r = SynthesisReport::identity(self.d, self.slot, format!("{name}: {why}"));
        self.parts.push((name.to_string(), r, 0.0));
    }

    /// Chain the stages, integrate the result from `inputs` and compare with
    /// `targets`.
    fn finish(self, spec: &ScenarioSpec, mode: MatchMode) -> Result<(MatchReport, Vec<EmpiricalMeasure>)> {
        let mut stages = Vec::new();
        let mut schedules = Vec::new();
        let mut notes = Vec::new();
        let (mut t, mut seg) = (0.0, 0);
        for (name, report, secs) in self.parts {
            let h = report.schedule.horizon;
            let k = report.schedule.segments.len();
            stages.push(StageReport {
                name,
                t_start: t,
                t_end: t + h,
                segments: (seg, seg + k),
                switch_count: report.switch_count,
                param_norm: report.param_norm,
                synth_seconds: secs,
                notes: report.notes.clone(),
            });
            notes.extend(report.notes);
            t += h;
            seg += k;
            schedules.push(report.schedule);
        }
        let schedule = ParamSchedule::chain(&schedules)
            .ok_or_else(|| Error::Invalid("no stages".into()))?
            .with_horizon(spec.horizon)?;
        if let Some(last) = stages.last_mut() {
            last.t_end = spec.horizon;
        }
        let finals = flow(&spec.inputs, &schedule)?;
        let errors = finals
            .par_iter()
            .zip(&spec.targets)
            .map(|(m, nu)| wasserstein2(m, nu))
            .collect();
        let report = MatchReport {
            mode,
            eps: spec.eps,
            horizon: spec.horizon,
            errors,
            switch_count: schedule.switch_count(),
            param_norm: schedule.param_norm(),
            stages,
            schedule,
            monge_bounds: None,
            reversal_error: None,
            amplification: None,
            notes,
        };
        Ok((report, finals))
    }
}

/// A point off every atom, as far from all of them as 10⁴ uniform candidates
/// allow.
pub fn find_hole(measures: &[EmpiricalMeasure], seed: u64) -> Result<UnitVector> {
    let d = measures
        .first()
        .map(EmpiricalMeasure::dim)
        .ok_or_else(|| Error::Invalid("no measures given".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = (f64::NEG_INFINITY, UnitVector::basis(d, 0));
    for _ in 0..HOLE_CANDIDATES {
        let c = UnitVector::random(&mut rng, d);
        let gap = measures
            .iter()
            .flat_map(|m| m.support())
            .map(|p| angle_between(p.as_slice(), c.as_slice()))
            .fold(f64::INFINITY, f64::min);
        if gap > best.0 {
            best = (gap, c);
        }
    }
    if best.0 < 1e-6 {
        return Err(Error::Precondition(
            "no point off the supports was found; concentrate the inputs into the positive orthant first".into(),
        ));
    }
    Ok(best.1)
}

/// Orthant transport when needed, then disentanglement, on a horizon `t`.
/// Identity when the measures are already separated and each lies in an open
/// hemisphere.
fn disentangle_stage(measures: &[EmpiricalMeasure], t: f64, seed: u64) -> Result<SynthesisReport> {
    let d = measures[0].dim();
    let hemispheric = measures.iter().all(|m| open_hemisphere_direction(m.support()).is_some());
    if hemispheric && (measures.len() == 1 || pairwise_separated(measures, tolerances::SEPARATION_MARGIN)) {
        return Ok(SynthesisReport::identity(d, t, "disentangle: already separated"));
    }
    let mut stages = Vec::new();
    let mut current = measures.to_vec();
    if !current.iter().all(in_open_orthant) {
        let hole = find_hole(&current, seed)?;
        let r = synth_orthant_transport(&current, &hole, 1.0)?;
        current = flow(&current, &r.schedule)?;
        stages.push(r);
    }
    stages.push(synth_disentangle(&current, 1.0)?);
    let k = stages.len() as f64;
    let seq = SynthesisReport::sequence(stages, k)?;
    let schedule = seq.schedule.reparametrized(t / k).with_horizon(t)?;
    Ok(SynthesisReport::new(schedule, seq.notes))
}

/// One `V = I`, `B = 0` segment long enough for every measure's support
/// diameter to drop to `diameter`. Measures evolve independently, so each
/// hitting time is found on its own.
fn cluster_stage(measures: &[EmpiricalMeasure], diameter: f64, t: f64) -> Result<SynthesisReport> {
    let d = measures[0].dim();
    let (params, rule) = synth_cluster_single(&DMatrix::zeros(d, d), diameter)?;
    let hits = measures
        .par_iter()
        .map(|m| cluster_until(m, &params, &rule, StepRule::default()).map(|r| r.hitting_time))
        .collect::<Result<Vec<f64>>>()?;
    let hit = hits.iter().cloned().fold(0.0, f64::max);
    if hit == 0.0 {
        return Ok(SynthesisReport::identity(d, t, "cluster: already within the diameter"));
    }
    let schedule = with_retries(
        "cluster",
        |factor| ParamSchedule::from_durations(vec![(t, params.scaled(factor * TIME_MARGIN * hit / t))]),
        |s| Ok(flow(measures, s)?.iter().all(|m| support_diameter(m) <= diameter)),
    )?;
    let notes = vec![format!(
        "cluster: target diameter {diameter:.3e}, hitting times {hits:?}, norm {:.4}",
        schedule.param_norm()
    )];
    Ok(SynthesisReport::new(schedule, notes))
}

/// Angle from the common center that the farthest atom is pushed out to.
const SPREAD_ANGLE: f64 = 0.8;

/// Magnify the configuration around the mean direction of all atoms with a
/// constant drift away from it. The flow of a constant drift is conformal, so
/// caps stay caps; compression then works with caps of usable size.
fn spread_stage(measures: &[EmpiricalMeasure], t: f64) -> Result<SynthesisReport> {
    let d = measures[0].dim();
    let mut sum = DVector::zeros(d);
    for m in measures {
        for (p, w) in m.points().iter().zip(m.weights()) {
            sum += p.as_vector() * *w;
        }
    }
    let p = UnitVector::normalize(sum).map_err(|_| Error::synth("spread", "atoms have zero mean"))?;
    let far = measures
        .iter()
        .flat_map(|m| m.points())
        .map(|x| angle_between(x.as_slice(), p.as_slice()))
        .fold(0.0, f64::max);
    if far >= SPREAD_ANGLE {
        return Ok(SynthesisReport::identity(d, t, "spread: already wide"));
    }
    // Under P⊥ₓ(−p) the angle to p obeys tan(φ/2) ∝ eᵗ.
    let time = ((SPREAD_ANGLE / 2.0).tan() / (far.max(1e-12) / 2.0).tan()).ln();
    let schedule = ParamSchedule::from_durations(vec![(t, TransformerParams::constant_drift(&-p.as_vector(), time / t))])?;
    let notes = vec![format!("spread: farthest atom from angle {far:.3e} to {SPREAD_ANGLE}, unit time {time:.4}")];
    Ok(SynthesisReport::new(schedule, notes))
}

/// Cluster with a diameter at most `diameter` and at most a tenth of the
/// smallest angle between cluster centers. Limit points are only known after
/// clustering, so the diameter is refined until it fits.
fn cluster_apart(
    measures: &[EmpiricalMeasure],
    diameter: f64,
    t: f64,
) -> Result<(SynthesisReport, Vec<EmpiricalMeasure>)> {
    let mut diameter = diameter;
    for _ in 0..5 {
        let r = cluster_stage(measures, diameter, t)?;
        let after = flow(measures, &r.schedule)?;
        let g = min_center_angle(&after)?;
        if diameter <= g / 10.0 {
            return Ok((r, after));
        }
        diameter = diameter.min(g / 20.0);
    }
    Err(Error::synth("cluster", "clusters stay too large against their distances"))
}

fn distinct_support(m: &EmpiricalMeasure) -> Vec<&UnitVector> {
    let mut out: Vec<&UnitVector> = Vec::new();
    for p in m.support() {
        if !out.iter().any(|q| angle_between(p.as_slice(), q.as_slice()) < tolerances::COINCIDENT) {
            out.push(p);
        }
    }
    out
}

/// The atom of each single-atom target.
fn point_targets(targets: &[EmpiricalMeasure]) -> Result<Vec<UnitVector>> {
    let ys: Vec<UnitVector> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s = distinct_support(t);
            if s.len() == 1 {
                Ok(s[0].clone())
            } else {
                Err(Error::Precondition(format!(
                    "target {i} has {} atoms; point mode needs single atoms, use restricted mode",
                    s.len()
                )))
            }
        })
        .collect::<Result<_>>()?;
    for i in 0..ys.len() {
        for j in i + 1..ys.len() {
            if angle_between(ys[i].as_slice(), ys[j].as_slice()) < tolerances::COINCIDENT {
                return Err(Error::Precondition(format!("targets {i} and {j} are the same point")));
            }
        }
    }
    Ok(ys)
}

/// Common atom count `M` of uniformly weighted targets.
fn restricted_atoms(targets: &[EmpiricalMeasure]) -> Result<usize> {
    let m = targets[0].len();
    for (i, t) in targets.iter().enumerate() {
        if t.len() != m {
            return Err(Error::Precondition(format!(
                "target {i} has {} atoms but target 0 has {m}; restricted mode needs a common M",
                t.len()
            )));
        }
        if t.weights().iter().any(|w| (w - 1.0 / m as f64).abs() > tolerances::WEIGHT_SUM) {
            return Err(Error::Precondition(format!(
                "target {i} has non-uniform weights, outside the restricted case"
            )));
        }
        if distinct_support(t).len() != m {
            return Err(Error::Precondition(format!("target {i} repeats an atom")));
        }
    }
    Ok(m)
}

/// For each pair, a weight-preserving bijection of input atoms onto target
/// atoms with least squared displacement.
fn transport_maps(inputs: &[EmpiricalMeasure], targets: &[EmpiricalMeasure]) -> Result<Vec<Vec<usize>>> {
    inputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (mu, nu))| {
            if mu.len() != nu.len() {
                return Err(Error::Precondition(format!(
                    "pair {i} has {} input atoms and {} target atoms: no transport map exists; \
                     group atoms so the counts agree",
                    mu.len(),
                    nu.len()
                )));
            }
            let n = mu.len();
            let cost = DMatrix::from_fn(n, n, |j, k| {
                if (mu.weights()[j] - nu.weights()[k]).abs() > tolerances::WEIGHT_SUM {
                    1e6
                } else {
                    (mu.points()[j].as_vector() - nu.points()[k].as_vector()).norm_squared()
                }
            });
            let sigma = assignment(&cost);
            if sigma
                .iter()
                .enumerate()
                .any(|(j, &k)| (mu.weights()[j] - nu.weights()[k]).abs() > tolerances::WEIGHT_SUM)
            {
                return Err(Error::Precondition(format!(
                    "pair {i}: the weights cannot be matched atom for atom"
                )));
            }
            Ok(sigma)
        })
        .collect()
}

/// Single-atom targets: disentangle, cluster every measure to diameter
/// `eps/20`, then carry each cluster to its target. Each stage gets `T/3`.
pub fn match_point_targets(spec: &ScenarioSpec) -> Result<MatchReport> {
    spec.validate_data()?;
    let ys = point_targets(&spec.targets)?;
    let mut c = Composer::new(&spec.inputs, spec.horizon / 4.0);
    let delta = spec.eps / 20.0;
    let needs_cluster = spec.inputs.iter().any(|m| support_diameter(m) > delta);
    if needs_cluster || spec.inputs.len() > 1 {
        c.stage("disentangle", |m, t| disentangle_stage(m, t, spec.seed))?;
    } else {
        c.skip("disentangle", "a single atom");
    }
    // Widening first keeps the cluster diameter set by eps rather than by the
    // distance between clusters.
    if needs_cluster && spec.inputs.len() > 1 {
        c.stage("spread", spread_stage)?;
    } else {
        c.skip("spread", "nothing to tell apart");
    }
    if needs_cluster {
        c.stage("cluster", |m, t| Ok(cluster_apart(m, delta, t)?.0))?;
    } else {
        c.skip("cluster", "every input already within the diameter");
    }
    c.stage("point match", |m, t| {
        let blobs: Vec<Vec<UnitVector>> = m.iter().map(|x| x.points().to_vec()).collect();
        Ok(match_blobs(&blobs, &ys, &[], t)?.report)
    })?;
    let (mut report, _) = c.finish(spec, MatchMode::Points)?;
    report.notes.push(format!("points: cluster diameter {delta:.3e}"));
    Ok(report)
}

/// Anchors for splitting a clustered measure into `m` groups: points on the
/// principal axis of its tangent spread, reaching twice the half width past
/// the center on both sides.
fn split_anchors(mu: &EmpiricalMeasure, m: usize) -> Result<(Vec<UnitVector>, f64)> {
    let c = mean_direction(mu)?;
    let d = mu.dim();
    if m == 1 {
        return Ok((vec![c], f64::INFINITY));
    }
    let tangent: Vec<DVector<f64>> = mu
        .points()
        .iter()
        .map(|p| p.as_vector() - c.as_vector() * p.dot(&c))
        .collect();
    let mut cov = DMatrix::zeros(d, d);
    for (v, w) in tangent.iter().zip(mu.weights()) {
        cov += v * v.transpose() * *w;
    }
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imax();
    let u = eig.eigenvectors.column(k).into_owned();
    let coords: Vec<f64> = tangent.iter().map(|v| v.dot(&u)).collect();
    let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let half = 0.5 * (hi - lo);
    if half <= 1e-12 {
        return Err(Error::Precondition("a measure is a single point and cannot be split".into()));
    }
    let mid = 0.5 * (hi + lo);
    let spacing = 4.0 * half / (m - 1) as f64;
    let anchors = (0..m)
        .map(|j| {
            let s = mid - 2.0 * half + spacing * j as f64;
            UnitVector::normalize(c.as_vector() + &u * s)
        })
        .collect::<Result<_>>()?;
    Ok((anchors, spacing))
}

/// Masses of the `m` groups: `1/m` each when the atoms allow it, otherwise
/// the closest split into whole atoms of a uniform measure.
fn group_masses(mu: &EmpiricalMeasure, m: usize) -> Vec<f64> {
    let n = mu.len();
    if !mu.is_uniform() || n % m == 0 {
        return vec![1.0 / m as f64; m];
    }
    (0..m)
        .map(|k| (n / m + usize::from(k < n % m)) as f64 / n as f64)
        .collect()
}

fn min_center_angle(measures: &[EmpiricalMeasure]) -> Result<f64> {
    let cs: Vec<UnitVector> = measures.iter().map(mean_direction).collect::<Result<_>>()?;
    let mut g = f64::INFINITY;
    for i in 0..cs.len() {
        for j in i + 1..cs.len() {
            g = g.min(angle_between(cs[i].as_slice(), cs[j].as_slice()));
        }
    }
    Ok(g)
}

fn max_displacement(a: &[EmpiricalMeasure], b: &[EmpiricalMeasure]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.points().iter().zip(y.points()))
        .map(|(p, q)| (p.as_vector() - q.as_vector()).norm())
        .fold(0.0, f64::max)
}

/// Disentangle the targets forward and check that reversing it returns them.
fn target_stage(spec: &ScenarioSpec, t: f64) -> Result<(SynthesisReport, Vec<EmpiricalMeasure>, f64)> {
    let r = disentangle_stage(&spec.targets, t, spec.seed ^ 0x7a6e).map_err(|e| e.in_stage("target disentangle"))?;
    if r.schedule.is_identity() {
        return Ok((r, spec.targets.clone(), 0.0));
    }
    let images = flow(&spec.targets, &r.schedule)?;
    let back = flow(&images, &r.schedule.reversed())?;
    let err = max_displacement(&spec.targets, &back);
    Ok((r, images, err))
}

fn reversed_report(r: &SynthesisReport) -> SynthesisReport {
    if r.schedule.is_identity() {
        return SynthesisReport::identity(r.schedule.dim(), r.schedule.horizon, "reverse targets: nothing to undo");
    }
    SynthesisReport::new(r.schedule.reversed(), vec!["reverse targets: target disentanglement run backwards".into()])
}

/// Targets with `M` equally weighted atoms each: disentangle the inputs,
/// cluster them, compress each onto `M` anchors, carry the `M·N` groups to the
/// disentangled targets and undo the target disentanglement. Each of the five
/// stages gets `T/5`.
pub fn match_restricted(spec: &ScenarioSpec) -> Result<MatchReport> {
    spec.validate_data()?;
    let m = restricted_atoms(&spec.targets)?;
    let slot = spec.horizon / 5.0;
    let (phi5, images, reversal) = target_stage(spec, slot)?;
    let mut c = Composer::new(&spec.inputs, slot);
    let atomic = spec
        .inputs
        .iter()
        .all(|mu| mu.len() == m && mu.is_uniform() && distinct_support(mu).len() == m);
    if atomic && spec.inputs.len() == 1 {
        c.skip("disentangle", "a single measure");
    } else {
        c.stage("disentangle", |x, t| disentangle_stage(x, t, spec.seed))?;
    }
    let mut eps_c = spec.eps / 4.0;
    let centers: Vec<Vec<UnitVector>>;
    if atomic {
        c.skip("cluster", "inputs already have M atoms");
        c.skip("compress", "inputs already have M atoms");
        centers = c.current.iter().map(|mu| mu.points().to_vec()).collect();
    } else {
        if let Some((i, _)) = spec.inputs.iter().enumerate().find(|(_, mu)| mu.len() < m) {
            return Err(Error::Precondition(format!("input {i} has fewer than {m} atoms")));
        }
        let (r, after) = cluster_apart(&c.current, 0.05, 0.5 * slot)?;
        let spread = spread_stage(&after, 0.5 * slot)?;
        let r = SynthesisReport::sequence(vec![r, spread], slot)?;
        c.stage("cluster", |_, _| Ok(r))?;
        let mut targets = Vec::new();
        let mut spacing = f64::INFINITY;
        for mu in &c.current {
            let (anchors, s) = split_anchors(mu, m)?;
            spacing = spacing.min(s);
            let masses = group_masses(mu, m);
            targets.push(
                anchors
                    .into_iter()
                    .zip(masses)
                    .map(|(anchor, mass)| AnchorTarget { anchor, mass })
                    .collect::<Vec<_>>(),
            );
        }
        // Compressed groups must be small against the anchor spacing and
        // against the spacing of the target atoms they are carried to.
        let goals: Vec<&UnitVector> = images.iter().flat_map(|m| m.points()).collect();
        let mut target_gap = f64::INFINITY;
        for i in 0..goals.len() {
            for j in i + 1..goals.len() {
                target_gap = target_gap.min(angle_between(goals[i].as_slice(), goals[j].as_slice()));
            }
        }
        eps_c = eps_c.min(0.1 * spacing).min(0.05 * target_gap);
        centers = targets.iter().map(|ts| ts.iter().map(|a| a.anchor.clone()).collect()).collect();
        c.stage("compress", |x, t| synth_compression(x, &targets, eps_c, t))?;
    }
    // Group every measure's atoms by nearest anchor and send each group to the
    // target atom assigned to its anchor.
    let mut blobs = Vec::new();
    let mut goals = Vec::new();
    for ((mu, nu), centers) in c.current.iter().zip(&images).zip(&centers) {
        let cost = DMatrix::from_fn(m, m, |j, k| (centers[j].as_vector() - nu.points()[k].as_vector()).norm_squared());
        let sigma = assignment(&cost);
        let mut groups = vec![Vec::new(); m];
        for p in mu.points() {
            let j = (0..m)
                .min_by(|&a, &b| {
                    angle_between(p.as_slice(), centers[a].as_slice())
                        .total_cmp(&angle_between(p.as_slice(), centers[b].as_slice()))
                })
                .expect("m ≥ 1");
            groups[j].push(p.clone());
        }
        for (j, g) in groups.into_iter().enumerate() {
            if !g.is_empty() {
                blobs.push(g);
                goals.push(nu.points()[sigma[j]].clone());
            }
        }
    }
    c.stage("point match", |_, t| Ok(match_blobs(&blobs, &goals, &[], t)?.report))?;
    let pre: Vec<f64> = c
        .current
        .iter()
        .zip(&images)
        .map(|(x, nu)| wasserstein2(x, nu))
        .collect();
    let back = reversed_report(&phi5);
    c.stage("reverse targets", |_, _| Ok(back))?;
    let (mut report, _) = c.finish(spec, MatchMode::Restricted)?;
    let pre_max = pre.iter().cloned().fold(0.0, f64::max);
    report.reversal_error = Some(reversal);
    report.amplification = (pre_max > 0.0).then(|| report.max_error() / pre_max);
    report.notes.push(format!(
        "restricted: M = {m}, compression accuracy {eps_c:.3e}, error before target reversal {pre_max:.3e}"
    ));
    Ok(report)
}

/// Targets with as many atoms as their inputs: disentangle both sides, carry
/// every input atom to the image of its assigned target atom, and undo the
/// target disentanglement. Each stage gets `T/3`.
pub fn match_general_empirical(spec: &ScenarioSpec) -> Result<MatchReport> {
    spec.validate_data()?;
    let maps = transport_maps(&spec.inputs, &spec.targets)?;
    if spec.inputs.iter().all(|m| m.len() == 1) {
        let mut report = match_point_targets(spec)?;
        report.mode = MatchMode::General;
        report.monge_bounds = Some(report.errors.clone());
        report.notes.push("general: single atoms, matched as point targets".into());
        return Ok(report);
    }
    let slot = spec.horizon / 3.0;
    let (phi3, images, reversal) = target_stage(spec, slot)?;
    let mut c = Composer::new(&spec.inputs, slot);
    c.stage("disentangle", |x, t| disentangle_stage(x, t, spec.seed))?;
    let mut pairs = Vec::new();
    for ((mu, nu), sigma) in c.current.iter().zip(&images).zip(&maps) {
        for (j, p) in mu.points().iter().enumerate() {
            pairs.push((p.clone(), nu.points()[sigma[j]].clone()));
        }
    }
    c.stage("point match", |_, t| synth_point_match(&pairs, t))?;
    let pre: Vec<f64> = c
        .current
        .iter()
        .zip(&images)
        .map(|(x, nu)| wasserstein2(x, nu))
        .collect();
    let back = reversed_report(&phi3);
    c.stage("reverse targets", |_, _| Ok(back))?;
    let (mut report, finals) = c.finish(spec, MatchMode::General)?;
    let bounds = finals
        .iter()
        .zip(&spec.targets)
        .zip(&maps)
        .map(|((fin, nu), sigma)| {
            fin.points()
                .iter()
                .zip(fin.weights())
                .enumerate()
                .map(|(j, (p, w))| w * (p.as_vector() - nu.points()[sigma[j]].as_vector()).norm_squared())
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let pre_max = pre.iter().cloned().fold(0.0, f64::max);
    report.monge_bounds = Some(bounds);
    report.reversal_error = Some(reversal);
    report.amplification = (pre_max > 0.0).then(|| report.max_error() / pre_max);
    report.notes.push(format!("general: error before target reversal {pre_max:.3e}"));
    Ok(report)
}
