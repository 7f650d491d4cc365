//! Making measures pairwise linearly separable.
//!
//! With `B = 0` every particle of a measure feels the same attention output,
//! the measure's own mean `m`. Under `V = ααᵀ` a particle moves towards `±α`
//! at rate `⟨α,m⟩`, and that rate keeps its sign. A measure whose mean is
//! orthogonal to `α` does not move at all. Isolation uses this to push every
//! other measure away from the target's mean direction `a`, concentrates the
//! target near `a` with a gate nobody else reaches, and undoes the first
//! phase. Disentangling isolates every measure in turn.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::travel::gate_travel_time;
use super::{check_dims, check_horizon, flow, with_retries, SynthesisReport};
use crate::dynamics::{AttentionMode, GateSpec, ParamSchedule, ParticleSystem, StepRule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{in_open_orthant, linearly_separable, mean, mean_cross, EmpiricalMeasure};
use crate::sphere::{angle_between, exp_map_dir, orthonormal_complement, UnitVector};

const TIME_MARGIN: f64 = 1.05;
/// Longest unit time spent on one mean-field segment.
const MAX_MEAN_TIME: f64 = 200.0;

/// Numerical thresholds of the separation constructions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsolationOptions {
    /// Hard margin at which two atom sets count as separated.
    pub margin: f64,
    /// Means whose normalized cross term is at most this are colinear.
    pub colinear_tol: f64,
    /// How many times the isolation radius is divided by 4 when the margin is
    /// missed.
    pub refinements: usize,
}

impl Default for IsolationOptions {
    fn default() -> Self {
        Self {
            margin: 1e-4,
            colinear_tol: 1e-8,
            refinements: 3,
        }
    }
}

pub(crate) fn mean_direction(mu: &EmpiricalMeasure) -> Result<UnitVector> {
    UnitVector::normalize(mean(mu))
        .map_err(|_| Error::Precondition("a measure has zero mean".into()))
}

pub(crate) fn same_measure(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> bool {
    mu.len() == nu.len()
        && mu
            .points()
            .iter()
            .zip(mu.weights())
            .all(|(p, w)| nu.points().iter().zip(nu.weights()).any(|(q, v)| p == q && w == v))
}

/// Mean-field segment pushing measures away from direction `a`.
struct MeanPhase {
    alpha: DVector<f64>,
    unit_time: f64,
}

fn mean_params(alpha: &DVector<f64>) -> TransformerParams {
    let d = alpha.len();
    TransformerParams::attention(alpha * alpha.transpose(), DMatrix::zeros(d, d))
}

/// Choose mean-field segments until every measure outside `fixed` has all
/// atoms with `⟨a,x⟩ < level`. Simulates each segment to see what is left.
fn plan_mean_phase(
    measures: &[EmpiricalMeasure],
    a: &UnitVector,
    fixed: &[usize],
    level: f64,
) -> Result<Vec<MeanPhase>> {
    let d = a.dim();
    let mut sys = ParticleSystem::new(measures, AttentionMode::Full)?;
    let mut used: Vec<DVector<f64>> = vec![a.as_vector().clone()];
    let mut phases = Vec::new();
    let high = |sys: &ParticleSystem, j: usize| {
        sys.state(j)
            .chunks(d)
            .zip(sys.weights(j))
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, _)| a.as_slice().iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    };
    for _ in 0..2 * (measures.len() + d) {
        let worst = (0..measures.len())
            .filter(|j| !fixed.contains(j))
            .map(|j| (j, high(&sys, j)))
            .filter(|(_, h)| *h >= level)
            .max_by(|x, y| x.1.total_cmp(&y.1));
        let Some((j, _)) = worst else {
            return Ok(phases);
        };
        let blocking: Vec<usize> = (0..measures.len())
            .filter(|k| !fixed.contains(k) && high(&sys, *k) >= level)
            .collect();
        if blocking.len() > 1 {
            if let Some((alpha, unit, after)) = joint_phase(&sys, &used, &blocking, |s, k| high(s, k) < level)? {
                sys = after;
                if used.len() < d {
                    used.push(alpha.clone());
                }
                phases.push(MeanPhase { alpha, unit_time: unit });
                continue;
            }
        }
        let mu = sys.measure(j)?;
        let m = mean(&mu);
        let off_a = &m - a.as_vector() * a.as_vector().dot(&m);
        let mut proj = m.clone();
        for u in &used {
            proj -= u * u.dot(&proj);
        }
        if proj.norm() < 0.1 * off_a.norm() {
            proj = off_a.clone();
        }
        if proj.norm() < 1e-12 {
            return Err(Error::Precondition(format!(
                "mean of measure {j} is colinear with the isolated direction"
            )));
        }
        let alpha = proj.normalize();
        // Stop as soon as measure j clears the level; running longer collapses
        // atoms past what the reversed phase can undo in floating point.
        let hit = sys.advance_until(&mean_params(&alpha), MAX_MEAN_TIME, StepRule::default(), |s| {
            high(s, j) < level
        })?;
        let unit = hit.ok_or_else(|| {
            Error::synth("isolation", format!("measure {j} did not leave the isolated direction"))
        })?;
        if used.len() < d {
            used.push(alpha.clone());
        }
        phases.push(MeanPhase {
            alpha,
            unit_time: unit.max(1e-6),
        });
    }
    Err(Error::synth(
        "isolation",
        "mean-field phase did not clear the isolated direction",
    ))
}

/// Candidates per phase when searching one direction for several measures.
const JOINT_CANDIDATES: usize = 256;
/// Longest unit time accepted for a phase shared by several measures.
const MAX_JOINT_TIME: f64 = 20.0;

/// One direction, orthogonal to `used`, whose phase clears every measure in
/// `blocking` at once. Maximizes the smallest normalized rate `|⟨α,m⟩|/|m|`
/// and simulates the phase on a copy of `sys`, returned with the time.
fn joint_phase(
    sys: &ParticleSystem,
    used: &[DVector<f64>],
    blocking: &[usize],
    clear: impl Fn(&ParticleSystem, usize) -> bool,
) -> Result<Option<(DVector<f64>, f64, ParticleSystem)>> {
    let d = used[0].len();
    let basis = orthonormal_complement(used, d);
    if basis.is_empty() {
        return Ok(None);
    }
    let means = blocking
        .iter()
        .map(|&k| sys.measure(k).map(|mu| mean(&mu)))
        .collect::<Result<Vec<_>>>()?;
    let score = |alpha: &DVector<f64>| {
        means
            .iter()
            .map(|m| alpha.dot(m).abs() / m.norm().max(1e-300))
            .fold(f64::INFINITY, f64::min)
    };
    let combine = |c: &[f64]| {
        let v = basis.iter().zip(c).fold(DVector::zeros(d), |acc, (b, x)| acc + b * *x);
        let n = v.norm();
        (n > 1e-12).then(|| v / n)
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut best: Option<(f64, DVector<f64>)> = None;
    for k in 0..JOINT_CANDIDATES {
        let c: Vec<f64> = if basis.len() == 2 {
            let th = std::f64::consts::PI * k as f64 / JOINT_CANDIDATES as f64;
            vec![th.cos(), th.sin()]
        } else {
            UnitVector::random(&mut rng, basis.len()).as_slice().to_vec()
        };
        if let Some(alpha) = combine(&c) {
            let s = score(&alpha);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((s, alpha));
            }
        }
        if basis.len() == 1 {
            break;
        }
    }
    let Some((s, alpha)) = best else { return Ok(None) };
    if s < 1e-3 {
        return Ok(None);
    }
    let mut trial = sys.clone();
    let hit = trial.advance_until(&mean_params(&alpha), MAX_JOINT_TIME, StepRule::default(), |t| {
        blocking.iter().all(|&k| clear(t, k))
    })?;
    Ok(hit.map(|u| (alpha, u.max(1e-6), trial)))
}

/// Isolation of one measure into the cap of radius `eps` around its mean
/// direction.
fn isolate(
    measures: &[EmpiricalMeasure],
    target: usize,
    partner: Option<usize>,
    eps: f64,
    t: f64,
) -> Result<SynthesisReport> {
    check_dims(measures)?;
    if target >= measures.len() || partner.is_some_and(|p| p >= measures.len() || p == target) {
        return Err(Error::Invalid("isolation indices out of range".into()));
    }
    let a = mean_direction(&measures[target])?;
    for (j, mu) in measures.iter().enumerate() {
        if j == target {
            continue;
        }
        let cross = mean_cross(a.as_vector(), &mean(mu));
        let colinear = cross <= IsolationOptions::default().colinear_tol;
        if Some(j) == partner && !colinear {
            return Err(Error::Precondition(format!("declared partner {j} is not colinear")));
        }
        if Some(j) != partner && colinear {
            return Err(Error::Precondition(format!(
                "mean of measure {j} is colinear with the mean of measure {target}"
            )));
        }
    }
    let fixed: Vec<usize> = std::iter::once(target).chain(partner).collect();
    let lowest = fixed
        .iter()
        .flat_map(|&i| measures[i].support())
        .map(|p| p.dot(&a))
        .fold(f64::INFINITY, f64::min);
    if lowest <= 0.0 {
        return Err(Error::Precondition(
            "isolated measure is not inside the hemisphere of its mean".into(),
        ));
    }
    let tau = 0.5 * lowest;
    let phases = plan_mean_phase(measures, &a, &fixed, tau / 2.0)?;
    let gate = GateSpec {
        a: a.clone(),
        tau,
        z: a.clone(),
    };
    let mut gate_time: f64 = 0.0;
    for p in fixed.iter().flat_map(|&i| measures[i].support()) {
        let g = gate_travel_time(&a, p.as_slice(), 0.5 * eps, |x| gate.value(x)).ok_or_else(|| {
            Error::synth("isolation", "gate vanishes on the path of an isolated atom")
        })?;
        gate_time = gate_time.max(g);
    }
    let n_seg = 2 * phases.len() + 1;
    let seg = t / n_seg as f64;
    let build = |factor: f64| {
        let mut params = Vec::with_capacity(n_seg);
        for ph in &phases {
            params.push(mean_params(&ph.alpha).scaled(ph.unit_time / seg));
        }
        params.push(TransformerParams::gate(
            &gate,
            factor * TIME_MARGIN * gate_time.max(1e-6) / seg,
        ));
        for ph in phases.iter().rev() {
            params.push(mean_params(&ph.alpha).scaled(ph.unit_time / seg).negated());
        }
        ParamSchedule::equal_split(t, params)
    };
    let schedule = with_retries("isolation", build, |s| {
        let out = flow(measures, s)?;
        Ok(fixed
            .iter()
            .all(|&i| out[i].support().all(|p| angle_between(p.as_slice(), a.as_slice()) <= eps)))
    })?;
    let mut notes = vec![format!(
        "isolation: measure {target} towards {:?}, threshold {tau:.6}, gate unit time {gate_time:.6}",
        a.as_slice()
    )];
    for ph in &phases {
        notes.push(format!(
            "isolation: mean phase along {:?}, unit time {:.6}",
            ph.alpha.as_slice(),
            ph.unit_time
        ));
    }
    Ok(SynthesisReport::new(schedule, notes))
}

/// Concentrate measure `target_index` (and a declared colinear partner) into
/// the cap of radius `eps` around its normalized mean while every other
/// measure ends where it started.
pub fn synth_barycenter_isolation(
    measures: &[EmpiricalMeasure],
    target_index: usize,
    colinear_partner: Option<usize>,
    eps: f64,
    t: f64,
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("eps {eps} outside (0, 1)")));
    }
    isolate(measures, target_index, colinear_partner, eps, t)
}

/// Distinct atom positions of all measures.
fn all_points(measures: &[&EmpiricalMeasure]) -> Vec<UnitVector> {
    let mut pts: Vec<UnitVector> = Vec::new();
    for m in measures {
        for p in m.support() {
            if !pts.contains(p) {
                pts.push(p.clone());
            }
        }
    }
    pts
}

/// One cap gate around an atom whose masses in `mu` and `nu` are not in the
/// ratio of the means, moving it so the means stop being colinear.
fn decolinearize_with(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    bystanders: &[&EmpiricalMeasure],
    t: f64,
) -> Result<SynthesisReport> {
    let d = mu.dim();
    if same_measure(mu, nu) {
        return Err(Error::Precondition("the two measures are identical".into()));
    }
    let (m_mu, m_nu) = (mean(mu), mean(nu));
    if mean_cross(&m_mu, &m_nu) > IsolationOptions::default().colinear_tol {
        return Ok(SynthesisReport::identity(d, t, "decolinearize: means already independent"));
    }
    let gamma = if m_mu.norm() > 0.0 { m_nu.norm() / m_mu.norm() } else { 0.0 };
    let mass_at = |m: &EmpiricalMeasure, p: &UnitVector| -> f64 {
        m.points()
            .iter()
            .zip(m.weights())
            .filter(|(q, _)| *q == p)
            .map(|(_, w)| *w)
            .sum()
    };
    let mut everyone: Vec<&EmpiricalMeasure> = vec![mu, nu];
    everyone.extend_from_slice(bystanders);
    let points = all_points(&everyone);
    let pair_points = all_points(&[mu, nu]);
    // Moving an atom by δ changes the cross term by (w_ν − γ w_μ) m_μ ∧ δ.
    let mut best: Option<(f64, UnitVector, f64, UnitVector)> = None;
    for p in &pair_points {
        let imbalance = mass_at(nu, p) - gamma * mass_at(mu, p);
        if imbalance.abs() < 1e-12 {
            continue;
        }
        let gap = points
            .iter()
            .filter(|q| *q != p)
            .map(|q| angle_between(p.as_slice(), q.as_slice()))
            .fold(f64::INFINITY, f64::min);
        let min_coord = p.as_slice().iter().cloned().fold(f64::INFINITY, f64::min);
        let r = (0.45 * gap).min(0.2).min(0.5 * min_coord.max(0.0).asin());
        if r <= 1e-9 {
            continue;
        }
        for u in orthonormal_complement(&[p.as_vector().clone()], d) {
            for sign in [1.0, -1.0] {
                let dir = &u * sign;
                let moved = exp_map_dir(p, &dir, 0.5 * r);
                let shift = moved.as_vector() - p.as_vector();
                let cross = mean_cross(
                    &(&m_mu + &shift * mass_at(mu, p)),
                    &(&m_nu + &shift * mass_at(nu, p)),
                );
                if best.as_ref().map_or(true, |b| cross > b.0) {
                    let z = UnitVector::normalize(dir).expect("unit tangent");
                    best = Some((cross, p.clone(), r, z));
                }
            }
        }
    }
    let (cross, p, r, z) = best
        .filter(|b| b.0 >= 1e-6)
        .ok_or_else(|| Error::synth("decolinearize", "no atom admits an isolating cap"))?;
    let gate = GateSpec::inside_cap(&p, r, z.clone());
    let phi0 = angle_between(p.as_slice(), z.as_slice());
    let unit = gate_travel_time(&z, p.as_slice(), phi0 - 0.5 * r, |x| gate.value(x))
        .ok_or_else(|| Error::synth("decolinearize", "gate vanishes on the drift path"))?;
    let schedule = ParamSchedule::from_durations(vec![(t, TransformerParams::gate(&gate, unit / t))])?;
    let out = flow(&[mu.clone(), nu.clone()], &schedule)?;
    let achieved = mean_cross(&mean(&out[0]), &mean(&out[1]));
    if achieved <= IsolationOptions::default().colinear_tol {
        return Err(Error::synth(
            "decolinearize",
            format!("means still colinear after the flow (cross term {achieved:.3e})"),
        ));
    }
    let notes = vec![format!(
        "decolinearize: cap of radius {r:.4} around {:?}, drift towards {:?}, predicted cross term {cross:.3e}, achieved {achieved:.3e}",
        p.as_slice(),
        z.as_slice()
    )];
    Ok(SynthesisReport::new(schedule, notes))
}

/// One perceptron segment after which the means of `mu` and `nu` are not
/// colinear. Identity when they already are not.
pub fn synth_decolinearize(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, t: f64) -> Result<SynthesisReport> {
    check_horizon(t)?;
    check_dims(&[mu.clone(), nu.clone()])?;
    decolinearize_with(mu, nu, &[], t)
}

pub(crate) fn pairwise_separated(measures: &[EmpiricalMeasure], margin: f64) -> bool {
    (0..measures.len()).all(|i| {
        (i + 1..measures.len()).all(|j| {
            linearly_separable(&measures[i], &measures[j]).is_some_and(|s| s.margin >= margin)
        })
    })
}

/// Decolinearize every colinear pair, then isolate every measure in turn. Each
/// stage is built on a unit horizon and the result is rescaled to `t`.
pub(crate) fn disentangle_with(
    measures: &[EmpiricalMeasure],
    t: f64,
    opts: &IsolationOptions,
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let d = check_dims(measures)?;
    let n = measures.len();
    for i in 0..n {
        if !in_open_orthant(&measures[i]) {
            return Err(Error::Precondition(format!(
                "measure {i} is not inside the open positive orthant"
            )));
        }
        for j in i + 1..n {
            if same_measure(&measures[i], &measures[j]) {
                return Err(Error::Precondition(format!("measures {i} and {j} are identical")));
            }
        }
    }
    if n == 1 || pairwise_separated(measures, opts.margin) {
        return Ok(SynthesisReport::identity(d, t, "disentangle: already separated"));
    }
    let mut stages = Vec::new();
    let mut current = measures.to_vec();
    for _ in 0..n * n {
        let pair = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .find(|&(i, j)| mean_cross(&mean(&current[i]), &mean(&current[j])) <= opts.colinear_tol);
        let Some((i, j)) = pair else { break };
        let others: Vec<&EmpiricalMeasure> =
            (0..n).filter(|&k| k != i && k != j).map(|k| &current[k]).collect();
        let stage = decolinearize_with(&current[i], &current[j], &others, 1.0)
            .map_err(|e| e.in_stage("disentangle"))?;
        current = flow(&current, &stage.schedule)?;
        stages.push(stage);
    }
    let centers: Vec<UnitVector> = current.iter().map(mean_direction).collect::<Result<_>>()?;
    let mut spread = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            spread = spread.min(angle_between(centers[i].as_slice(), centers[j].as_slice()));
        }
    }
    let mut eps_iso = (0.2 * spread).min(0.02);
    for _ in 0..=opts.refinements {
        let mut iso_stages = Vec::new();
        let mut state = current.clone();
        for i in 0..n {
            let stage = isolate(&state, i, None, eps_iso, 1.0).map_err(|e| e.in_stage("disentangle"))?;
            state = flow(&state, &stage.schedule)?;
            iso_stages.push(stage);
        }
        if pairwise_separated(&state, opts.margin) {
            stages.extend(iso_stages);
            let total = stages.len() as f64;
            let seq = SynthesisReport::sequence(stages, total)?;
            let schedule = seq.schedule.reparametrized(t / total).with_horizon(t)?;
            let mut notes = seq.notes;
            let switches = schedule.switch_count();
            notes.push(format!(
                "disentangle: isolation radius {eps_iso:.3e}, {switches} switches, C = switches/(d·N) = {:.3}",
                switches as f64 / (d * n) as f64
            ));
            let report = SynthesisReport::new(schedule, notes);
            return Ok(report);
        }
        eps_iso /= 4.0;
    }
    Err(Error::synth(
        "disentangle",
        format!("separation margin {} not reached", opts.margin),
    ))
}

/// Make the atom sets pairwise strictly linearly separable. Measures must lie
/// in the open positive orthant and be pairwise distinct.
pub fn synth_disentangle(measures: &[EmpiricalMeasure], t: f64) -> Result<SynthesisReport> {
    disentangle_with(measures, t, &IsolationOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(center: &[f64], offsets: &[[f64; 3]]) -> EmpiricalMeasure {
        let pts = offsets
            .iter()
            .map(|o| {
                UnitVector::normalize_slice(&[center[0] + o[0], center[1] + o[1], center[2] + o[2]]).unwrap()
            })
            .collect();
        EmpiricalMeasure::uniform(pts).unwrap()
    }

    const OFFSETS: [[f64; 3]; 4] = [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1], [-0.05, -0.05, 0.0]];

    #[test]
    fn single_measure_is_identity() {
        let mu = cloud(&[1.0, 1.0, 1.0], &OFFSETS);
        assert!(synth_disentangle(&[mu], 1.0).unwrap().schedule.is_identity());
    }

    #[test]
    fn identical_measures_rejected() {
        let mu = cloud(&[1.0, 1.0, 1.0], &OFFSETS);
        assert!(synth_disentangle(&[mu.clone(), mu.clone()], 1.0).is_err());
        assert!(synth_decolinearize(&mu, &mu, 1.0).is_err());
    }

    #[test]
    fn colinear_means_get_separated() {
        let x = UnitVector::normalize_slice(&[1.0, 0.2, 0.3]).unwrap();
        let y = UnitVector::normalize_slice(&[0.2, 1.0, 0.3]).unwrap();
        // w is the direction of x + y, so both means point along w.
        let w = UnitVector::normalize_slice(&[0.6, 0.6, 0.3]).unwrap();
        let mu = EmpiricalMeasure::uniform(vec![x.clone(), y.clone()]).unwrap();
        let nu = EmpiricalMeasure::new(vec![x, y, w], vec![0.25, 0.25, 0.5]).unwrap();
        assert!(mean_cross(&mean(&mu), &mean(&nu)) < 1e-8);
        let r = synth_decolinearize(&mu, &nu, 1.0).unwrap();
        assert_eq!(r.switch_count, 0);
        let out = flow(&[mu, nu], &r.schedule).unwrap();
        assert!(mean_cross(&mean(&out[0]), &mean(&out[1])) > 1e-6);
    }
}
