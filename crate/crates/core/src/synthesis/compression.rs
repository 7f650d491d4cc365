//! Compressing each measure onto finitely many prescribed atoms.
//!
//! Atoms are the only mass carriers, so the partition of a measure into
//! groups is a greedy nearest-anchor assignment: anchors are served in turn,
//! each taking the closest remaining atoms until its mass is met. Each group is
//! then driven to its anchor by one cap gate whose cap contains the group and
//! nothing else.

use serde::{Deserialize, Serialize};

use super::travel::gate_travel_time;
use super::{check_dims, check_horizon, flow, with_retries, SynthesisReport};
use crate::dynamics::{GateSpec, ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::{wasserstein2, EmpiricalMeasure};
use crate::sphere::{angle_between, UnitVector};

const TIME_MARGIN: f64 = 1.05;

/// One atom of a target measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    pub anchor: UnitVector,
    pub mass: f64,
}

/// The atomic measure `Σ m_k δ_{z_k}`.
pub(crate) fn atomic(targets: &[AnchorTarget]) -> Result<EmpiricalMeasure> {
    EmpiricalMeasure::new(
        targets.iter().map(|t| t.anchor.clone()).collect(),
        targets.iter().map(|t| t.mass).collect(),
    )
}

struct Stage {
    anchor: UnitVector,
    radius: f64,
    unit_time: f64,
    note: String,
}

fn already_atomic(mu: &EmpiricalMeasure, targets: &[AnchorTarget]) -> bool {
    let mut mass = vec![0.0; targets.len()];
    for (p, w) in mu.points().iter().zip(mu.weights()) {
        match targets
            .iter()
            .position(|t| angle_between(p.as_slice(), t.anchor.as_slice()) < 1e-12)
        {
            Some(k) => mass[k] += w,
            None if *w > 0.0 => return false,
            None => {}
        }
    }
    mass.iter().zip(targets).all(|(m, t)| (m - t.mass).abs() < 1e-9)
}

/// Permutations of `0..m` to try as anchor orders: all of them for `m ≤ 5`,
/// otherwise the cyclic shifts of the identity and of its reverse.
fn orders(m: usize) -> Vec<Vec<usize>> {
    fn permute(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..rest.len() {
            let x = rest.remove(i);
            prefix.push(x);
            permute(prefix, rest, out);
            prefix.pop();
            rest.insert(i, x);
        }
    }
    let mut out = Vec::new();
    if m <= 5 {
        permute(&mut Vec::new(), &mut (0..m).collect(), &mut out);
    } else {
        for s in 0..m {
            out.push((0..m).map(|i| (i + s) % m).collect());
            out.push((0..m).rev().map(|i| (i + s) % m).collect());
        }
    }
    out
}

/// Plan the stages for one measure given the points that must stay outside
/// every cap. Returns `None` when no anchor order admits separating caps.
fn plan_measure(
    mu: &EmpiricalMeasure,
    targets: &[AnchorTarget],
    obstacles: &[Vec<f64>],
    tol: f64,
) -> Option<Vec<Stage>> {
    'orders: for order in orders(targets.len()) {
        let mut remaining: Vec<usize> = (0..mu.len()).filter(|&j| mu.weights()[j] > 0.0).collect();
        let mut collapsed: Vec<&UnitVector> = Vec::new();
        let mut stages = Vec::new();
        for (pos, &k) in order.iter().enumerate() {
            let z = &targets[k].anchor;
            let dist = |j: usize| angle_between(mu.points()[j].as_slice(), z.as_slice());
            remaining.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)));
            let take = if pos + 1 == order.len() {
                remaining.len()
            } else {
                let mut acc = 0.0;
                let mut best = (f64::INFINITY, 0);
                for (c, &j) in remaining.iter().enumerate() {
                    acc += mu.weights()[j];
                    let err = (acc - targets[k].mass).abs();
                    if err < best.0 {
                        best = (err, c + 1);
                    }
                }
                best.1
            };
            let group: Vec<usize> = remaining.drain(..take).collect();
            if group.is_empty() {
                continue 'orders;
            }
            let r_in = group.iter().map(|&j| dist(j)).fold(0.0, f64::max);
            let r_out = remaining
                .iter()
                .map(|&j| dist(j))
                .chain(collapsed.iter().map(|c| angle_between(c.as_slice(), z.as_slice()) - tol))
                .chain(obstacles.iter().map(|p| angle_between(p, z.as_slice())))
                .fold(f64::INFINITY, f64::min);
            if r_in >= r_out {
                continue 'orders;
            }
            let radius = (0.5 * (r_in + r_out)).min(1.4);
            let gate = GateSpec::inside_cap(z, radius, z.clone());
            let mut unit_time: f64 = 0.0;
            for &j in &group {
                let t = gate_travel_time(z, mu.points()[j].as_slice(), tol, |p| gate.value(p))?;
                unit_time = unit_time.max(t);
            }
            let mass: f64 = group.iter().map(|&j| mu.weights()[j]).sum();
            stages.push(Stage {
                anchor: z.clone(),
                radius,
                unit_time,
                note: format!(
                    "compression: anchor {k} takes {} atoms of mass {mass:.6} (target {:.6}), cap radius {radius:.4}, unit time {unit_time:.6}",
                    group.len(),
                    targets[k].mass
                ),
            });
            collapsed.push(z);
        }
        return Some(stages);
    }
    None
}

/// Drive every measure onto its prescribed atoms `Σ m_k δ_{z_k}` with one cap
/// gate per group; other measures' atoms stay outside every cap and do not
/// move. The strength is verified by integration against the W₂ target `eps`.
pub fn synth_compression(
    measures: &[EmpiricalMeasure],
    targets: &[Vec<AnchorTarget>],
    eps: f64,
    t: f64,
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let d = check_dims(measures)?;
    if targets.len() != measures.len() {
        return Err(Error::Invalid(format!(
            "{} target lists for {} measures",
            targets.len(),
            measures.len()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Invalid(format!("eps {eps} must be positive")));
    }
    for (i, ts) in targets.iter().enumerate() {
        let total: f64 = ts.iter().map(|a| a.mass).sum();
        if ts.is_empty() || (total - 1.0).abs() > 1e-9 || ts.iter().any(|a| a.mass <= 0.0) {
            return Err(Error::Invalid(format!(
                "target masses of measure {i} must be positive and sum to 1 (sum {total})"
            )));
        }
        if ts.iter().any(|a| a.anchor.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: ts.iter().map(|a| a.anchor.dim()).find(|&x| x != d).unwrap_or(d),
            });
        }
    }
    // Each anchor must be closer to its own measure than to any other.
    for (i, ts) in targets.iter().enumerate() {
        for (k, a) in ts.iter().enumerate() {
            let near = |m: &EmpiricalMeasure| {
                m.support()
                    .map(|p| angle_between(p.as_slice(), a.anchor.as_slice()))
                    .fold(f64::INFINITY, f64::min)
            };
            let own = near(&measures[i]);
            let other = measures
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, m)| near(m))
                .fold(f64::INFINITY, f64::min);
            if own >= other {
                return Err(Error::Precondition(format!(
                    "anchor {k} of measure {i} is closer to another measure"
                )));
            }
        }
    }
    let tol = eps / 4.0;
    let mut stages = Vec::new();
    for (i, (mu, ts)) in measures.iter().zip(targets).enumerate() {
        if already_atomic(mu, ts) {
            continue;
        }
        let mut obstacles: Vec<Vec<f64>> = Vec::new();
        for (j, other) in measures.iter().enumerate() {
            if j != i {
                obstacles.extend(other.support().map(|p| p.as_slice().to_vec()));
            }
        }
        let plan = plan_measure(mu, ts, &obstacles, tol).ok_or_else(|| {
            Error::synth(
                "compression",
                format!("no anchor order of measure {i} admits separating caps"),
            )
        })?;
        stages.extend(plan.into_iter().filter(|s| s.unit_time > 0.0));
    }
    if stages.is_empty() {
        return Ok(SynthesisReport::identity(d, t, "compression: already atomic at the anchors"));
    }
    let seg = t / stages.len() as f64;
    let goal: Vec<EmpiricalMeasure> = targets.iter().map(|ts| atomic(ts)).collect::<Result<_>>()?;
    let build = |factor: f64| {
        let params = stages
            .iter()
            .map(|s| {
                let gate = GateSpec::inside_cap(&s.anchor, s.radius, s.anchor.clone());
                TransformerParams::gate(&gate, factor * TIME_MARGIN * s.unit_time / seg)
            })
            .collect();
        ParamSchedule::equal_split(t, params)
    };
    let schedule = with_retries("compression", build, |s| {
        let out = flow(measures, s)?;
        Ok(out.iter().zip(&goal).all(|(m, g)| wasserstein2(m, g) <= eps))
    })?;
    let notes = stages.into_iter().map(|s| s.note).collect();
    Ok(SynthesisReport::new(schedule, notes))
}
