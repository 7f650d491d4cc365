//! Hitting times of gated drifts along geodesics.
//!
//! Under `ẋ = g(x) P⊥ₓ z` with `g > 0`, a point moves along the geodesic from
//! its start towards `z` and its angle `φ` to `z` obeys `φ̇ = −g sin φ`. The time
//! from `φ₀` to `φ₁` is `∫ dψ / g` in the variable `ψ = ln tan(φ/2)`.

use crate::sphere::{angle_between, UnitVector};

/// Point at angle `phi` from `z` on the great circle through `z` along unit
/// tangent `u`.
fn along(z: &[f64], u: &[f64], phi: f64, out: &mut [f64]) {
    let (s, c) = phi.sin_cos();
    for k in 0..z.len() {
        out[k] = c * z[k] + s * u[k];
    }
}

/// Unit tangent at `z` towards `from`, or `None` when `from = ±z`.
fn tangent_at(z: &[f64], from: &[f64]) -> Option<Vec<f64>> {
    let c: f64 = z.iter().zip(from).map(|(a, b)| a * b).sum();
    let t: Vec<f64> = from.iter().zip(z).map(|(f, zk)| f - c * zk).collect();
    let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > 1e-15).then(|| t.into_iter().map(|v| v / n).collect())
}

/// Time for a point starting at `from` and driven by `strength(x) P⊥ₓ z` to
/// come within angle `phi_target > 0` of `z`. `None` when the strength is not
/// positive along the way or the start is antipodal to `z`.
pub fn gate_travel_time(
    z: &UnitVector,
    from: &[f64],
    phi_target: f64,
    strength: impl Fn(&[f64]) -> f64,
) -> Option<f64> {
    let phi0 = angle_between(from, z.as_slice());
    if phi0 <= phi_target {
        return Some(0.0);
    }
    if std::f64::consts::PI - phi0 < 1e-12 || phi_target <= 0.0 {
        return None;
    }
    let u = tangent_at(z.as_slice(), from)?;
    let mut x = vec![0.0; from.len()];
    let mut h = |psi: f64| -> f64 {
        let phi = 2.0 * psi.exp().atan();
        along(z.as_slice(), &u, phi, &mut x);
        let g = strength(&x);
        if g > 0.0 {
            1.0 / g
        } else {
            f64::INFINITY
        }
    };
    let psi1 = (phi_target / 2.0).tan().ln();
    let psi0 = (phi0 / 2.0).tan().ln();
    let t = adaptive_simpson(&mut h, psi1, psi0, 1e-10);
    (t.is_finite() && t >= 0.0).then_some(t)
}

/// Adaptive Simpson with relative tolerance `rel` and a cap on integrand
/// evaluations; past the cap the remaining panels are accepted as they are.
fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, rel: f64) -> f64 {
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    if !whole.is_finite() {
        return f64::INFINITY;
    }
    let mut budget = 200_000usize;
    let tol = (rel * whole.abs()).max(1e-300);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 40, &mut budget)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &mut impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: usize,
    budget: &mut usize,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    *budget = budget.saturating_sub(2);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if !(left.is_finite() && right.is_finite()) {
        return f64::INFINITY;
    }
    let delta = left + right - whole;
    if depth == 0 || *budget == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1, budget)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1, budget)
}

/// Walking from `z` towards `from` along their geodesic, the angle at which
/// `inside` first fails; the whole path up to that angle satisfies `inside`.
/// Returns the angle of `from` when the whole path is inside, and `None` when
/// `z` itself is not.
pub fn hitting_angle(z: &UnitVector, from: &[f64], inside: impl Fn(&[f64]) -> bool) -> Option<f64> {
    if !inside(z.as_slice()) {
        return None;
    }
    let phi0 = angle_between(from, z.as_slice());
    let Some(u) = tangent_at(z.as_slice(), from) else {
        return Some(phi0);
    };
    let mut x = vec![0.0; from.len()];
    let mut test = |phi: f64| {
        along(z.as_slice(), &u, phi, &mut x);
        inside(&x)
    };
    let n = 512;
    let mut lo = 0.0;
    for k in 1..=n {
        let phi = phi0 * k as f64 / n as f64;
        if !test(phi) {
            let mut hi = phi;
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if test(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            return Some(lo);
        }
        lo = phi;
    }
    Some(phi0)
}
