//! Empirical measures on the sphere and the statistics used to judge them:
//! means, support diameter, optimal transport and linear separability.

mod ot;
mod separability;

pub use ot::{
    assignment, optimal_coupling, wasserstein2, wasserstein2_sinkhorn, Coupling,
};
pub use separability::{linearly_separable, open_hemisphere_direction, Separator};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::{angle_between, UnitVector};
use crate::tolerances;

/// Weighted Dirac atoms `Σ w_j δ_{x_j}` on S^{d-1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMeasure", into = "RawMeasure")]
pub struct EmpiricalMeasure {
    points: Vec<UnitVector>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMeasure {
    points: Vec<UnitVector>,
    weights: Vec<f64>,
}

impl TryFrom<RawMeasure> for EmpiricalMeasure {
    type Error = Error;
    fn try_from(r: RawMeasure) -> Result<Self> {
        Self::new(r.points, r.weights)
    }
}

impl From<EmpiricalMeasure> for RawMeasure {
    fn from(m: EmpiricalMeasure) -> Self {
        RawMeasure {
            points: m.points,
            weights: m.weights,
        }
    }
}

impl EmpiricalMeasure {
    pub fn new(points: Vec<UnitVector>, weights: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Invalid("a measure needs at least one atom".into()));
        }
        if points.len() != weights.len() {
            return Err(Error::Invalid(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        let d = points[0].dim();
        if let Some(p) = points.iter().find(|p| p.dim() != d) {
            return Err(Error::Dimension {
                expected: d,
                found: p.dim(),
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::Invalid(format!("negative or non-finite weight {w}")));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > tolerances::WEIGHT_SUM {
            return Err(Error::Invalid(format!("weights sum to {s}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Uniform weights `1/n`.
    pub fn uniform(points: Vec<UnitVector>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn dirac(x: UnitVector) -> Self {
        Self {
            points: vec![x],
            weights: vec![1.0],
        }
    }

    /// Rebuild from row-major coordinates; rows must have unit norm.
    pub fn from_flat(d: usize, flat: &[f64], weights: Vec<f64>) -> Result<Self> {
        let points = flat
            .chunks_exact(d)
            .map(UnitVector::from_slice)
            .collect::<Result<Vec<_>>>()?;
        Self::new(points, weights)
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[UnitVector] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Atoms carrying positive mass.
    pub fn support(&self) -> impl Iterator<Item = &UnitVector> {
        self.points
            .iter()
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(p, _)| p)
    }

    /// Row-major copy of the coordinates.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * self.dim());
        for p in &self.points {
            out.extend_from_slice(p.as_slice());
        }
        out
    }

    pub fn is_uniform(&self) -> bool {
        let u = 1.0 / self.len() as f64;
        self.weights.iter().all(|w| (w - u).abs() <= 1e-12)
    }

    /// Same weights, new positions.
    pub fn with_points(&self, points: Vec<UnitVector>) -> Result<Self> {
        Self::new(points, self.weights.clone())
    }

    /// Mass of the atoms satisfying `pred`.
    pub fn mass_where(&self, pred: impl Fn(&UnitVector) -> bool) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| pred(p))
            .map(|(_, w)| *w)
            .sum()
    }
}

/// `E_μ[z] = Σ w_j x_j`.
pub fn mean(mu: &EmpiricalMeasure) -> DVector<f64> {
    let mut m = DVector::zeros(mu.dim());
    for (p, w) in mu.points.iter().zip(&mu.weights) {
        m.axpy(*w, p.as_vector(), 1.0);
    }
    m
}

/// Largest pairwise geodesic distance between atoms of positive mass.
pub fn support_diameter(mu: &EmpiricalMeasure) -> f64 {
    let pts: Vec<&UnitVector> = mu.support().collect();
    let mut best = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            best = best.max(angle_between(pts[i].as_slice(), pts[j].as_slice()));
        }
    }
    best
}

/// Image measure `T#μ`; weights are carried over unchanged.
pub fn pushforward(
    mu: &EmpiricalMeasure,
    map: impl Fn(&UnitVector) -> UnitVector,
) -> Result<EmpiricalMeasure> {
    let mut pts = Vec::with_capacity(mu.len());
    for p in &mu.points {
        let q = map(p);
        let n = q.as_vector().norm();
        if (n - 1.0).abs() > tolerances::RENORMALIZE || q.dim() != p.dim() {
            return Err(Error::Invalid(format!("map output has norm {n}")));
        }
        pts.push(q);
    }
    EmpiricalMeasure::new(pts, mu.weights.clone())
}

/// Keep atoms in the closed positive orthant and merge the mass of all other
/// atoms onto `anchor`, appended as the last atom.
pub fn concentrate_mass_orthant(
    mu: &EmpiricalMeasure,
    anchor: &UnitVector,
) -> Result<EmpiricalMeasure> {
    if anchor.dim() != mu.dim() {
        return Err(Error::Dimension {
            expected: mu.dim(),
            found: anchor.dim(),
        });
    }
    if anchor.as_slice().iter().any(|c| *c <= 0.0) {
        return Err(Error::Invalid("anchor must lie in the open positive orthant".into()));
    }
    let mut pts = Vec::new();
    let mut ws = Vec::new();
    let mut moved = 0.0;
    for (p, w) in mu.points.iter().zip(&mu.weights) {
        if p.as_slice().iter().all(|c| *c >= 0.0) {
            pts.push(p.clone());
            ws.push(*w);
        } else {
            moved += *w;
        }
    }
    if moved > 0.0 || pts.is_empty() {
        pts.push(anchor.clone());
        ws.push(moved);
    }
    EmpiricalMeasure::new(pts, ws)
}

/// True when every atom has all coordinates strictly positive.
pub fn in_open_orthant(mu: &EmpiricalMeasure) -> bool {
    mu.support().all(|p| p.as_slice().iter().all(|c| *c > 0.0))
}

/// Frobenius norm of `u vᵀ − v uᵀ` for the normalized means; zero iff the
/// means are colinear. A zero mean is colinear with everything.
pub fn mean_cross(u: &DVector<f64>, v: &DVector<f64>) -> f64 {
    let (nu, nv) = (u.norm(), v.norm());
    if nu < 1e-300 || nv < 1e-300 {
        return 0.0;
    }
    let (u, v) = (u / nu, v / nv);
    let mut s = 0.0;
    for i in 0..u.len() {
        for j in 0..u.len() {
            let t = u[i] * v[j] - v[i] * u[j];
            s += t * t;
        }
    }
    s.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn e(k: usize) -> UnitVector {
        UnitVector::basis(3, k)
    }

    #[test]
    fn construction_is_validated() {
        assert!(EmpiricalMeasure::new(vec![e(0)], vec![0.9]).is_err());
        assert!(EmpiricalMeasure::new(vec![e(0), e(1)], vec![1.5, -0.5]).is_err());
        assert!(EmpiricalMeasure::new(vec![], vec![]).is_err());
        assert!(EmpiricalMeasure::new(vec![e(0), UnitVector::basis(2, 0)], vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(mean(&EmpiricalMeasure::dirac(e(0))), *e(0).as_vector());
        let m = mean(&EmpiricalMeasure::uniform(vec![e(0), e(0).neg()]).unwrap());
        assert!(m.norm() == 0.0);
        let m = mean(&EmpiricalMeasure::uniform(vec![e(0), e(1)]).unwrap());
        assert_eq!(m.as_slice(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn diameter_examples() {
        assert_eq!(support_diameter(&EmpiricalMeasure::dirac(e(0))), 0.0);
        let two = EmpiricalMeasure::uniform(vec![e(0), e(1)]).unwrap();
        assert!((support_diameter(&two) - FRAC_PI_2).abs() < 1e-15);
        let mid = UnitVector::normalize_slice(&[1.0, 1.0, 0.0]).unwrap();
        let three = EmpiricalMeasure::uniform(vec![e(0), e(1), mid]).unwrap();
        assert!((support_diameter(&three) - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn pushforward_examples() {
        let mu = EmpiricalMeasure::uniform(vec![e(0), e(1)]).unwrap();
        assert_eq!(pushforward(&mu, |x| x.clone()).unwrap(), mu);
        let flipped = pushforward(&EmpiricalMeasure::dirac(e(0)), |x| x.neg()).unwrap();
        assert_eq!(flipped.points()[0], e(0).neg());
        let rot = |x: &UnitVector| {
            let s = x.as_slice();
            UnitVector::from_slice(&[-s[1], s[0], s[2]]).unwrap()
        };
        let r = pushforward(&mu, rot).unwrap();
        assert_eq!(r.points()[0], e(1));
        assert_eq!(r.points()[1], e(0).neg());
        assert!(pushforward(&mu, |_| UnitVector::basis(2, 0)).is_err());
    }

    #[test]
    fn orthant_concentration() {
        let d = 3;
        let anchor = UnitVector::normalize(DVector::from_element(d, 1.0)).unwrap();
        let inside = EmpiricalMeasure::uniform(vec![e(0), e(1)]).unwrap();
        assert_eq!(concentrate_mass_orthant(&inside, &anchor).unwrap(), inside);
        let mixed = EmpiricalMeasure::uniform(vec![e(0), e(0).neg()]).unwrap();
        let out = concentrate_mass_orthant(&mixed, &anchor).unwrap();
        assert_eq!(out.points(), &[e(0), anchor.clone()]);
        assert_eq!(out.weights(), &[0.5, 0.5]);
        assert!(concentrate_mass_orthant(&mixed, &e(0).neg()).is_err());
    }

    #[test]
    fn cross_term_detects_colinearity() {
        let u = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(mean_cross(&u, &(&u * 0.5)) < 1e-15);
        assert!(mean_cross(&u, &DVector::from_vec(vec![3.0, 2.0, 1.0])) > 0.1);
    }

    proptest! {
        #[test]
        fn pushforward_preserves_mass(raw in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, 0.1f64..1.0), 1..10)) {
            let pts: Vec<UnitVector> = raw.iter().map(|(a, b, _)| UnitVector::normalize_slice(&[*a, *b, 1.0]).unwrap()).collect();
            let total: f64 = raw.iter().map(|r| r.2).sum();
            let ws: Vec<f64> = raw.iter().map(|r| r.2 / total).collect();
            let s: f64 = ws.iter().sum();
            let mut ws = ws;
            ws[0] += 1.0 - s;
            let mu = EmpiricalMeasure::new(pts, ws).unwrap();
            let img = pushforward(&mu, |x| x.neg()).unwrap();
            prop_assert!((img.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
