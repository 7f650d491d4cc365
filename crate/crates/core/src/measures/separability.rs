//! Strict linear separability of atom sets, decided by a hard-margin linear
//! program.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::EmpiricalMeasure;
use crate::sphere::UnitVector;
use crate::tolerances;

/// Hyperplane `{⟨normal, x⟩ = offset}` with `⟨normal, x⟩ < offset` on the
/// first set and `> offset` on the second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Separator {
    /// Unit normal.
    pub normal: DVector<f64>,
    pub offset: f64,
    /// Half the gap between the two sets along `normal`.
    pub margin: f64,
}

/// Maximize `t` subject to `⟨a,x⟩ ≤ c − t` on `xs`, `⟨a,y⟩ ≥ c + t` on `ys`,
/// `a ∈ [−1, 1]^d`. The box makes the program bounded; the returned margin
/// is then measured with the Euclidean norm of `a`.
pub(crate) fn separate_points(xs: &[&[f64]], ys: &[&[f64]], d: usize) -> Option<Separator> {
    if xs.is_empty() || ys.is_empty() {
        return None;
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let a: Vec<_> = (0..d).map(|_| lp.add_var(0.0, (-1.0, 1.0))).collect();
    let bound = (d as f64).sqrt() + 1.0;
    let c = lp.add_var(0.0, (-bound, bound));
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, bound));
    for x in xs {
        let mut row: Vec<_> = a.iter().zip(x.iter()).map(|(v, xi)| (*v, *xi)).collect();
        row.push((c, -1.0));
        row.push((t, 1.0));
        lp.add_constraint(row.as_slice(), ComparisonOp::Le, 0.0);
    }
    for y in ys {
        let mut row: Vec<_> = a.iter().zip(y.iter()).map(|(v, yi)| (*v, *yi)).collect();
        row.push((c, -1.0));
        row.push((t, -1.0));
        lp.add_constraint(row.as_slice(), ComparisonOp::Ge, 0.0);
    }
    let sol = lp.solve().ok()?.into_solution().ok()?;
    let normal = DVector::from_iterator(d, a.iter().map(|v| sol[*v]));
    let n = normal.norm();
    if sol[t] <= tolerances::LP_MARGIN_FLOOR || n < 1e-12 {
        return None;
    }
    let normal = normal / n;
    // Recompute the gap from the data rather than trusting the LP tolerance.
    let hi = xs
        .iter()
        .map(|x| dot(normal.as_slice(), x))
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = ys
        .iter()
        .map(|y| dot(normal.as_slice(), y))
        .fold(f64::INFINITY, f64::min);
    let margin = 0.5 * (lo - hi);
    if margin <= tolerances::LP_MARGIN_FLOOR {
        return None;
    }
    Some(Separator {
        normal,
        offset: 0.5 * (lo + hi),
        margin,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Strict separator between the supports of `mu` and `nu`, if one exists.
pub fn linearly_separable(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Option<Separator> {
    let xs: Vec<&[f64]> = mu.support().map(UnitVector::as_slice).collect();
    let ys: Vec<&[f64]> = nu.support().map(UnitVector::as_slice).collect();
    separate_points(&xs, &ys, mu.dim())
}

/// A direction `a` with `⟨a, x⟩ > 0` for every given point, i.e. a witness
/// that the points lie in an open hemisphere.
pub fn open_hemisphere_direction<'a>(
    points: impl IntoIterator<Item = &'a UnitVector>,
) -> Option<DVector<f64>> {
    let pts: Vec<&[f64]> = points.into_iter().map(UnitVector::as_slice).collect();
    let d = pts.first()?.len();
    let origin = vec![0.0; d];
    separate_points(&[origin.as_slice()], &pts, d).map(|s| s.normal)
}
