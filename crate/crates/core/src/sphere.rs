//! Geometry of the unit sphere S^{d-1} embedded in R^d.
//!
//! Points are [`UnitVector`]s, balls are open geodesic [`SphericalCap`]s.
//! Every function here is pure.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tolerances;

/// A point on S^{d-1}, d ≥ 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(DVector<f64>);

impl UnitVector {
    /// Wrap a vector whose norm is already 1 within [`tolerances::UNIT_NORM`].
    /// Coordinates off by more than rounding are renormalized; vectors already
    /// normalized are kept bit for bit so that reloading is a fixed point.
    pub fn new(v: DVector<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Invalid(format!("dimension {} < 2", v.len())));
        }
        let n = v.norm();
        if !n.is_finite() || (n - 1.0).abs() > tolerances::UNIT_NORM {
            return Err(Error::Invalid(format!("vector norm {n} is not 1")));
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self(v));
        }
        Ok(Self(v / n))
    }

    /// Normalize any nonzero finite vector onto the sphere.
    pub fn normalize(v: DVector<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::Invalid(format!("dimension {} < 2", v.len())));
        }
        let n = v.norm();
        if !n.is_finite() || n <= 1e-300 {
            return Err(Error::Invalid("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(Self(v / n))
    }

    pub fn from_slice(xs: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(xs))
    }

    pub fn normalize_slice(xs: &[f64]) -> Result<Self> {
        Self::normalize(DVector::from_column_slice(xs))
    }

    /// The k-th standard basis vector of R^d.
    pub fn basis(d: usize, k: usize) -> Self {
        let mut v = DVector::zeros(d);
        v[k] = 1.0;
        Self(v)
    }

    /// Uniform sample on S^{d-1}.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        loop {
            let v = DVector::from_fn(d, |_, _| gaussian(rng));
            let n = v.norm();
            if n > 1e-8 {
                return Self(v / n);
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }

    pub fn neg(&self) -> Self {
        Self(-&self.0)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(DVector::from_vec(v))
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Vec<f64> {
        u.0.as_slice().to_vec()
    }
}

impl AsRef<DVector<f64>> for UnitVector {
    fn as_ref(&self) -> &DVector<f64> {
        &self.0
    }
}

/// Open geodesic ball `B(center, radius)` with radius in (0, π).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphericalCap {
    pub center: UnitVector,
    pub radius: f64,
}

impl SphericalCap {
    pub fn new(center: UnitVector, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius < std::f64::consts::PI) {
            return Err(Error::Invalid(format!("cap radius {radius} outside (0, π)")));
        }
        Ok(Self { center, radius })
    }

    pub fn contains(&self, x: &UnitVector) -> bool {
        in_cap(x, self)
    }
}

/// `(I − xxᵀ) v`.
pub fn project_tangent(x: &UnitVector, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != x.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            found: v.len(),
        });
    }
    let s = x.0.dot(v);
    Ok(v - &x.0 * s)
}

/// Geodesic distance `arccos⟨x, y⟩`, with the inner product clamped to [−1, 1].
pub fn geodesic_distance(x: &UnitVector, y: &UnitVector) -> f64 {
    angle_between(x.as_slice(), y.as_slice())
}

/// Geodesic distance between two unit-norm slices.
pub fn angle_between(x: &[f64], y: &[f64]) -> f64 {
    // For nearly (anti)parallel vectors arccos loses precision; atan2 of the
    // sine and cosine does not.
    let c: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let s2: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let t = b - c * a;
            t * t
        })
        .sum();
    s2.sqrt().atan2(c.clamp(-1.0, 1.0)).clamp(0.0, std::f64::consts::PI)
}

/// Open-ball membership: `d_g(x, center) < radius`.
pub fn in_cap(x: &UnitVector, cap: &SphericalCap) -> bool {
    geodesic_distance(x, &cap.center) < cap.radius
}

/// Point at fraction `s` along the minimizing geodesic from `x` to `y`.
pub fn geodesic_point(x: &UnitVector, y: &UnitVector, s: f64) -> Result<UnitVector> {
    let theta = geodesic_distance(x, y);
    if std::f64::consts::PI - theta < 1e-12 {
        return Err(Error::Invalid("antipodal points have no unique geodesic".into()));
    }
    if theta < 1e-15 {
        return Ok(x.clone());
    }
    let u = tangent_direction(x, y).expect("non-degenerate pair");
    Ok(exp_map_dir(x, &u, s * theta))
}

/// Unit tangent vector at `x` pointing along the geodesic towards `y`.
/// Returns `None` when `y = ±x`.
pub fn tangent_direction(x: &UnitVector, y: &UnitVector) -> Option<DVector<f64>> {
    let t = &y.0 - &x.0 * x.0.dot(&y.0);
    let n = t.norm();
    if n < 1e-15 {
        None
    } else {
        Some(t / n)
    }
}

/// `cos(φ) x + sin(φ) u` for a unit tangent `u` at `x`.
pub fn exp_map_dir(x: &UnitVector, u: &DVector<f64>, phi: f64) -> UnitVector {
    let v = &x.0 * phi.cos() + u * phi.sin();
    let n = v.norm();
    UnitVector(v / n)
}

/// Exponential map at `x` of a tangent vector `v`.
pub fn exp_map(x: &UnitVector, v: &DVector<f64>) -> UnitVector {
    let n = v.norm();
    if n < 1e-300 {
        return x.clone();
    }
    exp_map_dir(x, &(v / n), n)
}

/// An orthonormal basis of the orthogonal complement of `span(vs)` in R^d,
/// built by Gram–Schmidt against the standard basis.
pub fn orthonormal_complement(vs: &[DVector<f64>], d: usize) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for v in vs {
        let mut w = v.clone();
        for b in &basis {
            let c = b.dot(&w);
            w -= b * c;
        }
        let n = w.norm();
        if n > 1e-10 {
            basis.push(w / n);
        }
    }
    let fixed = basis.len();
    for k in 0..d {
        if basis.len() == d {
            break;
        }
        let mut w = DVector::zeros(d);
        w[k] = 1.0;
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w -= b * c;
            }
        }
        let n = w.norm();
        if n > 1e-8 {
            basis.push(w / n);
        }
    }
    basis.split_off(fixed)
}

/// Standard normal sample via Box–Muller (keeps `rand_distr` out of the
/// library dependency set).
pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > 1e-300 {
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Uniform sample from the cap `B(center, radius)` (area measure).
pub fn random_in_cap<R: Rng + ?Sized>(rng: &mut R, center: &UnitVector, radius: f64) -> UnitVector {
    let d = center.dim();
    loop {
        let p = UnitVector::random(rng, d);
        if geodesic_distance(&p, center) < radius {
            return p;
        }
        // Rejection is slow for tiny caps; fall back to a direct draw.
        if radius < 0.5 {
            let t = loop {
                let v = DVector::from_fn(d, |_, _| gaussian(rng));
                let v = &v - &center.0 * center.0.dot(&v);
                let n = v.norm();
                if n > 1e-12 {
                    break v / n;
                }
            };
            let r: f64 = rng.gen::<f64>().powf(1.0 / (d as f64 - 1.0)) * radius;
            return exp_map_dir(center, &t, r);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    fn e(d: usize, k: usize) -> UnitVector {
        UnitVector::basis(d, k)
    }

    #[test]
    fn projection_examples() {
        let x = e(3, 0);
        let p = project_tangent(&x, e(3, 0).as_vector()).unwrap();
        assert!(p.norm() < 1e-15);
        let p = project_tangent(&x, e(3, 1).as_vector()).unwrap();
        assert_eq!(p, *e(3, 1).as_vector());
        let x = UnitVector::normalize_slice(&[1.0, 1.0, 0.0]).unwrap();
        let p = project_tangent(&x, e(3, 0).as_vector()).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] + 0.5).abs() < 1e-15 && p[2] == 0.0);
        assert!(project_tangent(&x, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn distance_examples() {
        assert_eq!(geodesic_distance(&e(3, 0), &e(3, 0)), 0.0);
        assert!((geodesic_distance(&e(3, 0), &e(3, 1)) - FRAC_PI_2).abs() < 1e-15);
        assert!((geodesic_distance(&e(3, 0), &e(3, 0).neg()) - PI).abs() < 1e-15);
    }

    #[test]
    fn cap_examples() {
        assert!(in_cap(&e(3, 0), &SphericalCap::new(e(3, 0), 0.1).unwrap()));
        assert!(!in_cap(&e(3, 1), &SphericalCap::new(e(3, 0), PI / 4.0).unwrap()));
        // A point exactly on the boundary is outside the open ball.
        assert!(!in_cap(&e(3, 1), &SphericalCap::new(e(3, 0), FRAC_PI_2).unwrap()));
        assert!(SphericalCap::new(e(3, 0), 0.0).is_err());
        assert!(SphericalCap::new(e(3, 0), PI).is_err());
    }

    #[test]
    fn geodesic_point_examples() {
        let (a, b) = (e(3, 0), e(3, 1));
        assert_eq!(geodesic_point(&a, &b, 0.0).unwrap(), a);
        let p = geodesic_point(&a, &b, 1.0).unwrap();
        assert!((p.as_vector() - b.as_vector()).norm() < 1e-15);
        let m = geodesic_point(&a, &b, 0.5).unwrap();
        assert!((m.as_slice()[0] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((m.as_slice()[1] - FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(geodesic_point(&a, &a.neg(), 0.5).is_err());
    }

    #[test]
    fn complement_is_orthonormal() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let b = orthonormal_complement(&[v.clone()], 4);
        assert_eq!(b.len(), 3);
        for (i, bi) in b.iter().enumerate() {
            assert!(bi.dot(&v).abs() < 1e-12);
            for (j, bj) in b.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((bi.dot(bj) - want).abs() < 1e-12);
            }
        }
    }

    fn unit(d: usize) -> impl Strategy<Value = UnitVector> {
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("nonzero", |v| v.iter().map(|a| a * a).sum::<f64>() > 1e-4)
            .prop_map(|v| UnitVector::normalize_slice(&v).unwrap())
    }

    proptest! {
        #[test]
        fn projection_is_tangent_and_idempotent(x in unit(5), v in prop::collection::vec(-3.0f64..3.0, 5)) {
            let v = DVector::from_vec(v);
            let p = project_tangent(&x, &v).unwrap();
            prop_assert!(p.dot(x.as_vector()).abs() <= 1e-12);
            let pp = project_tangent(&x, &p).unwrap();
            prop_assert!((pp - &p).amax() <= 1e-12);
        }

        #[test]
        fn triangle_inequality(x in unit(4), y in unit(4), z in unit(4)) {
            let (a, b, c) = (geodesic_distance(&x, &y), geodesic_distance(&y, &z), geodesic_distance(&x, &z));
            prop_assert!(c <= a + b + 1e-9);
            prop_assert!((geodesic_distance(&y, &x) - a).abs() < 1e-15);
        }

        #[test]
        fn geodesic_point_is_unit(x in unit(3), y in unit(3), s in 0.0f64..1.0) {
            prop_assume!(geodesic_distance(&x, &y) < PI - 1e-6);
            let p = geodesic_point(&x, &y, s).unwrap();
            prop_assert!((p.as_vector().norm() - 1.0).abs() <= 1e-12);
            let theta = geodesic_distance(&x, &y);
            prop_assert!((geodesic_distance(&x, &p) - s * theta).abs() < 1e-9);
        }
    }
}
