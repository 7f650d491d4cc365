//! Moving mass from one cap into an overlapping one, and along chains of caps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::travel::{gate_travel_time, hitting_angle};
use super::{check_horizon, flow, with_retries, SynthesisReport};
use crate::dynamics::{GateSpec, ParamSchedule, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::sphere::{
    angle_between, geodesic_distance, geodesic_point, orthonormal_complement, exp_map_dir,
    SphericalCap, UnitVector,
};

/// Safety factor applied to every computed travel time.
const TIME_MARGIN: f64 = 1.05;

fn cap_value(cap: &SphericalCap, x: &[f64]) -> f64 {
    let c: f64 = cap.center.as_slice().iter().zip(x).map(|(a, b)| a * b).sum();
    c - cap.radius.cos()
}

fn validate_pair(b0: &SphericalCap, b1: &SphericalCap, omega: &UnitVector) -> Result<()> {
    let d = b0.center.dim();
    if b1.center.dim() != d || omega.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: if b1.center.dim() != d { b1.center.dim() } else { omega.dim() },
        });
    }
    if b0.radius >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::Precondition(format!(
            "source cap radius {} must be below π/2",
            b0.radius
        )));
    }
    if geodesic_distance(&b0.center, &b1.center) >= b0.radius + b1.radius {
        return Err(Error::Precondition("the two caps do not intersect".into()));
    }
    if !(b0.contains(omega) && b1.contains(omega)) {
        return Err(Error::Precondition(
            "omega must lie in the interior of both caps".into(),
        ));
    }
    Ok(())
}

/// Angle from `omega` at which the path towards `x` leaves the target cap,
/// shrunk by a tenth of omega's depth in the cap for robustness.
fn entry_angle(b1: &SphericalCap, omega: &UnitVector, x: &[f64]) -> Option<f64> {
    let depth = b1.radius - geodesic_distance(omega, &b1.center);
    let r = b1.radius - 0.1 * depth;
    let cos_r = r.cos();
    hitting_angle(omega, x, |p| {
        let c: f64 = b1.center.as_slice().iter().zip(p).map(|(a, b)| a * b).sum();
        c > cos_r
    })
}

/// Unit-strength time for a point of `b0` to enter `b1` under the gate
/// `(⟨c₀,x⟩ − cos r₀)₊ P⊥ₓ ω`. `None` if it never does.
fn entry_time(b0: &SphericalCap, b1: &SphericalCap, omega: &UnitVector, x: &[f64]) -> Option<f64> {
    let phi = entry_angle(b1, omega, x)?;
    if angle_between(x, omega.as_slice()) <= phi {
        return Some(0.0);
    }
    gate_travel_time(omega, x, phi, |p| cap_value(b0, p))
}

/// Radius of the concentric sub-cap of `B(·, r)` carrying a `1 − eps`
/// fraction of the uniform surface measure on `S^{d-1}`.
fn inner_radius(r: f64, eps: f64, d: usize) -> f64 {
    let area = |rho: f64| {
        let n = 256;
        let h = rho / n as f64;
        let f = |s: f64| s.sin().powi(d as i32 - 2);
        let mut acc = f(0.0) + f(rho);
        for k in 1..n {
            acc += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
        }
        acc * h / 3.0
    };
    let target = (1.0 - eps) * area(r);
    let (mut lo, mut hi) = (0.0, r);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if area(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Unit-strength time after which at least a `1 − eps` fraction of the mass of
/// every reference measure in `b0` has entered `b1`. Without reference atoms
/// in `b0`, the worst case over the boundary of the sub-cap carrying a
/// `1 − eps` fraction of uniform mass is used, sampled at 256 points.
pub fn two_balls_time(
    b0: &SphericalCap,
    b1: &SphericalCap,
    omega: &UnitVector,
    eps: f64,
    reference: &[EmpiricalMeasure],
) -> Result<f64> {
    validate_pair(b0, b1, omega)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Invalid(format!("eps {eps} outside (0, 1)")));
    }
    let mut worst: Option<f64> = None;
    for mu in reference {
        let mut times: Vec<(f64, f64)> = mu
            .points()
            .iter()
            .zip(mu.weights())
            .filter(|(p, _)| cap_value(b0, p.as_slice()) > 0.0)
            .map(|(p, w)| (entry_time(b0, b1, omega, p.as_slice()).unwrap_or(f64::INFINITY), *w))
            .collect();
        if times.is_empty() {
            continue;
        }
        times.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = times.iter().map(|t| t.1).sum();
        let mut acc = 0.0;
        let mut needed = f64::INFINITY;
        for (t, w) in &times {
            acc += w;
            if acc >= (1.0 - eps) * total - 1e-12 {
                needed = *t;
                break;
            }
        }
        if !needed.is_finite() {
            return Err(Error::synth(
                "two-balls",
                "more than an eps fraction of the mass sits where the gate vanishes",
            ));
        }
        worst = Some(worst.map_or(needed, |w: f64| w.max(needed)));
    }
    if let Some(t) = worst {
        return Ok(t);
    }
    let d = omega.dim();
    let rho = inner_radius(b0.radius, eps, d);
    let basis = orthonormal_complement(std::slice::from_ref(b0.center.as_vector()), d);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut dirs: Vec<nalgebra::DVector<f64>> = (0..256)
        .map(|_| {
            let v = UnitVector::random(&mut rng, basis.len().max(2));
            basis
                .iter()
                .zip(v.as_slice())
                .fold(nalgebra::DVector::zeros(d), |acc, (b, c)| acc + b * *c)
        })
        .filter(|v| v.norm() > 1e-8)
        .map(|v| v.normalize())
        .collect();
    if let Some(away) = crate::sphere::tangent_direction(&b0.center, omega) {
        dirs.push(-away);
    }
    let mut t: f64 = 0.0;
    for u in dirs {
        let p = exp_map_dir(&b0.center, &u, rho);
        let ti = entry_time(b0, b1, omega, p.as_slice()).ok_or_else(|| {
            Error::synth("two-balls", "a sampled point of the source cap never enters the target")
        })?;
        t = t.max(ti);
    }
    Ok(t)
}

fn cap_mass_fraction_ok(
    before: &[EmpiricalMeasure],
    after: &[EmpiricalMeasure],
    b0: &SphericalCap,
    b1: &SphericalCap,
    eps: f64,
) -> bool {
    before.iter().zip(after).all(|(m0, m1)| {
        let start = m0.mass_where(|x| b0.contains(x));
        let end = m1.mass_where(|x| b0.contains(x) && b1.contains(x));
        end >= (1.0 - eps) * start - 1e-12
    })
}

/// One gate segment `U = 𝟙c₀ᵀ`, `b = −cos r₀ 𝟙`, `W𝟙 ∝ ω`: the field is
/// positive exactly on `B₀` and pushes it towards `ω ∈ B₀ ∩ B₁`, so points
/// outside `B₀` never move and all but an `eps` fraction of the mass of `B₀`
/// ends in `B₀ ∩ B₁`. The strength is set from `reference` measures when
/// given (and verified by integration), from uniform mass otherwise.
pub fn synth_two_balls(
    b0: &SphericalCap,
    b1: &SphericalCap,
    omega: &UnitVector,
    eps: f64,
    t: f64,
    reference: &[EmpiricalMeasure],
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    let unit = two_balls_time(b0, b1, omega, eps, reference)?;
    let gate = GateSpec::inside_cap(&b0.center, b0.radius, omega.clone());
    let d = omega.dim();
    let note = |scale: f64| {
        format!(
            "two-balls: B0 radius {:.4}, B1 radius {:.4}, unit time {unit:.6}, gate scale {scale:.6}",
            b0.radius, b1.radius
        )
    };
    if unit == 0.0 {
        return Ok(SynthesisReport::identity(d, t, note(0.0)));
    }
    let build = |factor: f64| {
        let scale = factor * TIME_MARGIN * unit / t;
        let s = ParamSchedule::from_durations(vec![(t, TransformerParams::gate(&gate, scale))])?
            .with_horizon(t)?;
        Ok((s, scale))
    };
    let (schedule, scale) = if reference.is_empty() {
        build(1.0)?
    } else {
        with_retries("two-balls", build, |(s, _)| {
            let after = flow(reference, s)?;
            Ok(cap_mass_fraction_ok(reference, &after, b0, b1, eps))
        })?
    };
    Ok(SynthesisReport::new(schedule, vec![note(scale)]))
}

/// Point in the middle of the overlap of two caps along their center geodesic.
fn overlap_midpoint(a: &SphericalCap, b: &SphericalCap) -> Result<UnitVector> {
    let l = geodesic_distance(&a.center, &b.center);
    if l < 1e-12 {
        return Ok(a.center.clone());
    }
    let lo = (l - b.radius).max(0.0);
    let hi = a.radius.min(l + b.radius);
    geodesic_point(&a.center, &b.center, 0.5 * (lo + hi) / l)
}

/// Validate the chain condition: consecutive caps intersect, caps two or more
/// apart are disjoint.
fn validate_chain(balls: &[SphericalCap]) -> Result<()> {
    for i in 0..balls.len() {
        for j in i + 1..balls.len() {
            let dist = geodesic_distance(&balls[i].center, &balls[j].center);
            let touching = dist < balls[i].radius + balls[j].radius;
            if j == i + 1 && !touching {
                return Err(Error::Precondition(format!(
                    "caps {i} and {j} are consecutive but do not intersect"
                )));
            }
            if j > i + 1 && touching {
                return Err(Error::Precondition(format!(
                    "caps {i} and {j} are not consecutive but intersect"
                )));
            }
        }
    }
    Ok(())
}

/// `K = balls.len() − 1` two-balls stages moving mass from cap `k` into cap
/// `k+1`, each in `T/K`. Points outside the union never move and the final cap
/// receives at least `(1 − eps)^K` of the mass initially in the union. The last
/// stage drives towards `omega_final` when given (it must lie in the last two
/// caps), towards the middle of their overlap otherwise.
pub fn synth_tubular_chain(
    balls: &[SphericalCap],
    omega_final: Option<&UnitVector>,
    eps: f64,
    t: f64,
    reference: &[EmpiricalMeasure],
) -> Result<SynthesisReport> {
    check_horizon(t)?;
    if balls.len() < 2 {
        return Err(Error::Invalid("a chain needs at least two caps".into()));
    }
    validate_chain(balls)?;
    let k = balls.len() - 1;
    let budget = t / k as f64;
    let mut current = reference.to_vec();
    let mut stages = Vec::with_capacity(k);
    for i in 0..k {
        let omega = match omega_final {
            Some(w) if i + 1 == k => w.clone(),
            _ => overlap_midpoint(&balls[i], &balls[i + 1])?,
        };
        let stage = synth_two_balls(&balls[i], &balls[i + 1], &omega, eps, budget, &current)
            .map_err(|e| e.in_stage(&format!("chain stage {i}")))?;
        if !current.is_empty() {
            current = flow(&current, &stage.schedule)?;
        }
        stages.push(stage);
    }
    SynthesisReport::sequence(stages, t)
}
