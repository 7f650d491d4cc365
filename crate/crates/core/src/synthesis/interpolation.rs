//! Moving points (or tight blobs of points) to prescribed targets one at a time
//! while every other point returns to where it was.
//!
//! Per pair, six perceptron segments:
//! 1. a gate `(⟨γ,x⟩ − τ)₊` gathers everything above the slab `|⟨γ,x⟩| < τ`
//!    near `ω₊`;
//! 2. the opposite gate gathers everything below it near `ω₋`;
//! 3. a corridor gate, zero on the cap `B(ω, 3π/16)` holding both gathered
//!    groups, drifts the source half way along its geodesic to the target;
//! 4. the same gate with a drift point just past the target finishes the trip;
//! 5. and 6. undo the two gathers.
//!
//! The source and target both lie in the slab, so the gathers never touch
//! them.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::travel::gate_travel_time;
use super::{check_horizon, SynthesisReport};
use crate::dynamics::{FlowMap, GateSpec, ParamSchedule, StepRule, TransformerParams};
use crate::error::{Error, Result};
use crate::sphere::{angle_between, exp_map_dir, gaussian, orthonormal_complement, tangent_direction, UnitVector};

const TIME_MARGIN: f64 = 1.05;
/// Slab half-widths stay below this so `ω±` sit strictly inside the gather
/// half-spaces.
fn slab_cap() -> f64 {
    0.9 * (PI / 8.0).sin()
}
/// Radius of the corridor gate's zero cap around `ω`.
const CORRIDOR: f64 = 3.0 * PI / 16.0;
/// Gathered points end within this angle of `ω±`.
const GATHER_RADIUS: f64 = PI / 40.0;
/// Endpoint tolerance for single points.
const ENDPOINT_TOL: f64 = 1e-3;
const SEED: u64 = 0x5eed_0001;

/// Geometry and timing of one source-to-target move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub source: UnitVector,
    pub target: UnitVector,
    /// Slab normal, orthogonal to `source − target`.
    pub gamma: UnitVector,
    pub tau: f64,
    /// Gap between the slab contents and the nearest gathered point.
    pub slab_margin: f64,
    pub omega: UnitVector,
    /// Unit-strength times of the six segments.
    pub unit_times: [f64; 6],
}

/// A pair plan together with its gates.
#[derive(Debug, Clone)]
pub(crate) struct BlobMatch {
    pub plan: PairPlan,
    gates: [GateSpec; 4],
}

impl BlobMatch {
    /// The six segment parameters when each segment lasts `seg`.
    pub fn params(&self, seg: f64) -> Vec<TransformerParams> {
        let t = &self.plan.unit_times;
        let g = &self.gates;
        vec![
            TransformerParams::gate(&g[0], t[0] / seg),
            TransformerParams::gate(&g[1], t[1] / seg),
            TransformerParams::gate(&g[2], t[2] / seg),
            TransformerParams::gate(&g[3], t[3] / seg),
            TransformerParams::gate(&g[1], t[4] / seg).negated(),
            TransformerParams::gate(&g[0], t[5] / seg).negated(),
        ]
    }

    /// Six segments of unit length.
    pub fn schedule(&self) -> Result<ParamSchedule> {
        ParamSchedule::equal_split(6.0, self.params(1.0))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn blob_center(blob: &[UnitVector]) -> Result<UnitVector> {
    let d = blob[0].dim();
    let mut s = DVector::zeros(d);
    for p in blob {
        s += p.as_vector();
    }
    UnitVector::normalize(s).map_err(|_| Error::Precondition("blob has zero mean".into()))
}

/// Gap `min(m, cap) − h` for slab normal `γ`, with `h` the largest
/// `|⟨γ,·⟩|` the slab must hold and `m` the smallest over gathered points.
fn slab_gap(gamma: &[f64], blob: &[UnitVector], reach: f64, others: &[UnitVector]) -> (f64, f64, f64) {
    let h = blob
        .iter()
        .map(|q| dot(gamma, q.as_slice()).abs())
        .fold(reach, f64::max);
    let m = others
        .iter()
        .map(|p| dot(gamma, p.as_slice()).abs())
        .fold(f64::INFINITY, f64::min);
    (m.min(slab_cap()) - h, h, m)
}

fn combine(basis: &[DVector<f64>], coeffs: &[f64]) -> Option<DVector<f64>> {
    let mut v = DVector::zeros(basis[0].len());
    for (b, c) in basis.iter().zip(coeffs) {
        v += b * *c;
    }
    let n = v.norm();
    (n > 1e-12).then(|| v / n)
}

/// Slab normal maximizing the gap. The normals orthogonal to the blob center
/// give the thinnest slab, but their gap peak is narrow, so they are searched
/// explicitly: on the circle for `d = 3` they seed the grid refinement, above
/// they get their own seeded random search and local climb.
fn search_gamma(
    basis: &[DVector<f64>],
    center: &UnitVector,
    blob: &[UnitVector],
    reach: f64,
    others: &[UnitVector],
    seed: u64,
) -> (DVector<f64>, f64) {
    let score = |coeffs: &[f64]| -> Option<f64> {
        let g = combine(basis, coeffs)?;
        let r = reach + dot(g.as_slice(), center.as_slice()).abs();
        Some(slab_gap(g.as_slice(), blob, r, others).0)
    };
    let consider = |coeffs: Vec<f64>, best: &mut (f64, Vec<f64>)| {
        if let Some(s) = score(&coeffs) {
            if s > best.0 {
                *best = (s, coeffs);
            }
        }
    };
    // Coefficients of the component of `center` inside the basis span.
    let k: Vec<f64> = basis.iter().map(|b| dot(b.as_slice(), center.as_slice())).collect();
    let k_norm = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    let flat = |c: Vec<f64>| -> Vec<f64> {
        if k_norm < 1e-15 {
            return c;
        }
        let t = c.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (k_norm * k_norm);
        c.iter().zip(&k).map(|(a, b)| a - t * b).collect()
    };
    let mut best: (f64, Vec<f64>) = (f64::NEG_INFINITY, vec![1.0; basis.len()]);
    if basis.len() == 2 {
        let mut seeds = vec![(f64::NEG_INFINITY, vec![1.0, 0.0]), (f64::NEG_INFINITY, vec![1.0, 0.0])];
        for j in 0..720 {
            let th = PI * j as f64 / 720.0;
            consider(vec![th.cos(), th.sin()], &mut seeds[0]);
        }
        consider(vec![-k[1], k[0]], &mut seeds[1]);
        for mut cand in seeds {
            let mut th0 = cand.1[1].atan2(cand.1[0]);
            let mut width = PI / 720.0;
            for _ in 0..6 {
                for j in -20..=20 {
                    let th = th0 + width * j as f64 / 20.0;
                    consider(vec![th.cos(), th.sin()], &mut cand);
                }
                th0 = cand.1[1].atan2(cand.1[0]);
                width /= 10.0;
            }
            if cand.0 > best.0 {
                best = cand;
            }
        }
    } else {
        for (pass, constrained) in [false, true].into_iter().enumerate() {
            let shape = |c: Vec<f64>| if constrained { flat(c) } else { c };
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pass as u64));
            let mut cand: (f64, Vec<f64>) = (f64::NEG_INFINITY, vec![1.0; basis.len()]);
            for _ in 0..2000 {
                let c: Vec<f64> = (0..basis.len()).map(|_| gaussian(&mut rng)).collect();
                consider(shape(c), &mut cand);
            }
            let mut radius = 0.1;
            let mut stale = 0;
            for _ in 0..400 {
                let c: Vec<f64> = cand.1.iter().map(|x| x + radius * gaussian(&mut rng)).collect();
                let before = cand.0;
                consider(shape(c), &mut cand);
                if cand.0 > before {
                    stale = 0;
                } else {
                    stale += 1;
                    if stale == 20 {
                        radius /= 2.0;
                        stale = 0;
                    }
                }
            }
            if cand.0 > best.0 {
                best = cand;
            }
        }
    }
    let g = combine(basis, &best.1).expect("best candidate is nonzero");
    (g, best.0)
}

/// Corridor anchor `ω ⊥ γ` farthest from the source-to-target path, searched
/// on the circle through the direction opposite the path.
fn search_omega(gamma: &DVector<f64>, path: &[UnitVector]) -> (UnitVector, f64) {
    let d = gamma.len();
    let mid = path.iter().fold(DVector::zeros(d), |s, p| s + p.as_vector());
    let chord = path[path.len() - 1].as_vector() - path[0].as_vector();
    let proj = |v: &DVector<f64>, against: &[&DVector<f64>]| {
        let mut w = v.clone();
        for u in against {
            w -= *u * u.dot(&w);
        }
        w
    };
    let mut e1 = proj(&(-&mid), &[gamma]);
    if e1.norm() < 1e-9 {
        e1 = orthonormal_complement(&[gamma.clone()], d).remove(0);
    }
    let e1 = e1.normalize();
    let mut e2 = proj(&chord, &[gamma, &e1]);
    if e2.norm() < 1e-9 {
        e2 = orthonormal_complement(&[gamma.clone(), e1.clone()], d).remove(0);
    }
    let e2 = e2.normalize();
    let clearance = |w: &DVector<f64>| {
        path.iter()
            .map(|p| angle_between(w.as_slice(), p.as_slice()))
            .fold(f64::INFINITY, f64::min)
    };
    let mut best = (f64::NEG_INFINITY, e1.clone());
    for k in 0..720 {
        let th = 2.0 * PI * k as f64 / 720.0;
        let w = &e1 * th.cos() + &e2 * th.sin();
        let c = clearance(&w);
        if c > best.0 {
            best = (c, w);
        }
    }
    (UnitVector::normalize(best.1).expect("unit combination"), best.0)
}

/// Plan the six-segment move of `blob` to `target`, gathering `others` out of
/// the way. `None` when the blob center already sits on the target.
pub(crate) fn plan_blob_match(
    blob: &[UnitVector],
    target: &UnitVector,
    others: &[UnitVector],
    seed: u64,
) -> Result<Option<BlobMatch>> {
    let d = target.dim();
    if d < 3 {
        return Err(Error::Precondition(
            "point matching needs d ≥ 3: on the circle the order of particles is preserved".into(),
        ));
    }
    if blob.is_empty() {
        return Err(Error::Invalid("empty blob".into()));
    }
    let center = blob_center(blob)?;
    let len = angle_between(center.as_slice(), target.as_slice());
    if len < 1e-12 {
        return Ok(None);
    }
    if PI - len < 1e-6 {
        return Err(Error::Precondition("source and target are antipodal".into()));
    }
    let spread = blob
        .iter()
        .map(|q| angle_between(q.as_slice(), center.as_slice()))
        .fold(0.0, f64::max);
    let basis = orthonormal_complement(&[center.as_vector() - target.as_vector()], d);
    let (gamma, gap) = search_gamma(&basis, &center, blob, 2.0 * spread, others, seed);
    if gap <= 0.0 {
        return Err(Error::synth(
            "point match",
            format!("no slab normal isolates the source (best gap {gap:.3e})"),
        ));
    }
    let (_, h, m) = slab_gap(
        gamma.as_slice(),
        blob,
        2.0 * spread + dot(gamma.as_slice(), center.as_slice()).abs(),
        others,
    );
    let tau = 0.5 * (h + m.min(slab_cap()));
    let dir = tangent_direction(&center, target).expect("not antipodal");
    let path: Vec<UnitVector> = (0..=64)
        .map(|k| exp_map_dir(&center, &dir, len * k as f64 / 64.0))
        .collect();
    let (omega, clearance) = search_omega(&gamma, &path);
    if clearance <= CORRIDOR + spread + 0.02 {
        return Err(Error::synth(
            "point match",
            format!("corridor anchor too close to the path (clearance {clearance:.4})"),
        ));
    }
    let gamma_u = UnitVector::normalize(gamma.clone()).expect("unit");
    let (s8, c8) = (PI / 8.0).sin_cos();
    let omega_plus = UnitVector::normalize(omega.as_vector() * c8 + &gamma * s8).expect("unit");
    let omega_minus = UnitVector::normalize(omega.as_vector() * c8 - &gamma * s8).expect("unit");
    let delta = (0.25 * (PI - len)).min(0.3);
    let z1 = exp_map_dir(&center, &dir, 0.75 * len);
    let z2 = exp_map_dir(&center, &dir, len + delta);
    let corridor = |z: UnitVector| GateSpec {
        a: omega.neg(),
        tau: -CORRIDOR.cos(),
        z,
    };
    let gates = [
        GateSpec {
            a: gamma_u.clone(),
            tau,
            z: omega_plus.clone(),
        },
        GateSpec {
            a: gamma_u.neg(),
            tau,
            z: omega_minus.clone(),
        },
        corridor(z1.clone()),
        corridor(z2.clone()),
    ];
    let gather_time = |gate: &GateSpec| -> Result<f64> {
        let mut t: f64 = 0.0;
        for p in others.iter().filter(|p| gate.value(p.as_slice()) > 0.0) {
            let s = gate_travel_time(&gate.z, p.as_slice(), GATHER_RADIUS, |x| gate.value(x))
                .ok_or_else(|| Error::synth("point match", "gather gate vanishes on a path"))?;
            t = t.max(s);
        }
        Ok(TIME_MARGIN * t)
    };
    let t1 = gather_time(&gates[0])?;
    let t2 = gather_time(&gates[1])?;
    let halfway = exp_map_dir(&center, &dir, 0.5 * len);
    let no_corridor = || Error::synth("point match", "corridor gate vanishes on the path");
    let t3 = gate_travel_time(&z1, center.as_slice(), 0.25 * len, |x| gates[2].value(x))
        .ok_or_else(no_corridor)?;
    let t4 = gate_travel_time(&z2, halfway.as_slice(), delta, |x| gates[3].value(x))
        .ok_or_else(no_corridor)?;
    Ok(Some(BlobMatch {
        plan: PairPlan {
            source: center,
            target: target.clone(),
            gamma: gamma_u,
            tau,
            slab_margin: 0.5 * gap,
            omega,
            unit_times: [t1, t2, t3, t4, t2, t1],
        },
        gates,
    }))
}

/// Outcome of moving several blobs in sequence.
pub(crate) struct BlobRun {
    pub report: SynthesisReport,
    /// Final position of every blob.
    pub blobs: Vec<Vec<UnitVector>>,
}

/// Move `blobs[i]` to `targets[i]` one after another; `bystanders` are
/// gathered and restored with everything else.
pub(crate) fn match_blobs(
    blobs: &[Vec<UnitVector>],
    targets: &[UnitVector],
    bystanders: &[UnitVector],
    t: f64,
) -> Result<BlobRun> {
    check_horizon(t)?;
    if blobs.len() != targets.len() || blobs.is_empty() {
        return Err(Error::Invalid("need one target per blob".into()));
    }
    let d = targets[0].dim();
    let mut current: Vec<Vec<UnitVector>> = blobs.to_vec();
    let mut extra = bystanders.to_vec();
    let mut pieces = Vec::new();
    let mut notes = Vec::new();
    for i in 0..blobs.len() {
        let others: Vec<UnitVector> = current
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, b)| b.iter().cloned())
            .chain(extra.iter().cloned())
            .collect();
        let Some(m) = plan_blob_match(&current[i], &targets[i], &others, SEED + i as u64)? else {
            continue;
        };
        let schedule = m.schedule()?;
        let map = FlowMap::new(schedule.clone(), StepRule::default())?;
        for b in current.iter_mut() {
            *b = map.apply_all(b)?;
        }
        extra = map.apply_all(&extra)?;
        notes.push(format!(
            "point match {i}: gamma {:?}, tau {:.4}, slab margin {:.3e}, omega {:?}, unit times {:?}, seed {}",
            m.plan.gamma.as_slice(),
            m.plan.tau,
            m.plan.slab_margin,
            m.plan.omega.as_slice(),
            m.plan.unit_times,
            SEED + i as u64
        ));
        pieces.push(schedule);
    }
    let report = match ParamSchedule::chain(&pieces) {
        None => SynthesisReport::identity(d, t, "point match: every source already on its target"),
        Some(s) => {
            let total = 6.0 * pieces.len() as f64;
            let schedule = s.reparametrized(t / total).with_horizon(t)?;
            SynthesisReport::new(schedule, notes)
        }
    };
    Ok(BlobRun {
        report,
        blobs: current,
    })
}

/// Move each `x0ⁱ` to `yⁱ` with six perceptron segments per pair while every
/// other point returns to its position. Needs `d ≥ 3`.
pub fn synth_point_match(pairs: &[(UnitVector, UnitVector)], t: f64) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let Some(first) = pairs.first() else {
        return Err(Error::Invalid("no pairs given".into()));
    };
    let d = first.0.dim();
    if d < 3 {
        return Err(Error::Precondition(
            "point matching needs d ≥ 3: on the circle the order of particles is preserved".into(),
        ));
    }
    for (i, (x, y)) in pairs.iter().enumerate() {
        if x.dim() != d || y.dim() != d {
            return Err(Error::Dimension {
                expected: d,
                found: if x.dim() != d { x.dim() } else { y.dim() },
            });
        }
        for (x2, y2) in &pairs[..i] {
            if x == x2 || y == y2 {
                return Err(Error::Precondition(format!(
                    "pair {i} repeats a source or a target"
                )));
            }
        }
    }
    let blobs: Vec<Vec<UnitVector>> = pairs.iter().map(|(x, _)| vec![x.clone()]).collect();
    let targets: Vec<UnitVector> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let run = match_blobs(&blobs, &targets, &[], t)?;
    let mut report = run.report;
    let mut worst: f64 = 0.0;
    for (b, y) in run.blobs.iter().zip(&targets) {
        worst = worst.max(angle_between(b[0].as_slice(), y.as_slice()));
    }
    if worst > ENDPOINT_TOL {
        return Err(Error::synth(
            "point match",
            format!("endpoint error {worst:.3e} above {ENDPOINT_TOL}"),
        ));
    }
    report.notes.push(format!("point match: worst endpoint error {worst:.3e}"));
    Ok(report)
}
