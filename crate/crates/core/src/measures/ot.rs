//! Optimal transport between empirical measures with squared Euclidean
//! ground cost.
//!
//! Equal-size uniform clouds are solved exactly as an assignment problem;
//! general weights go through the transportation linear program. The
//! entropic solver is a surrogate for large clouds only.

use microlp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::tolerances;

/// Transport plan between two measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    /// `plan[i][j]`: mass sent from source atom i to target atom j.
    pub plan: Vec<Vec<f64>>,
}

impl Coupling {
    pub fn cost(&self, c: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (i, row) in self.plan.iter().enumerate() {
            for (j, p) in row.iter().enumerate() {
                s += p * c[(i, j)];
            }
        }
        s
    }

    /// Largest deviation of the plan's marginals from the given weights.
    pub fn marginal_violation(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (row, ai) in self.plan.iter().zip(a) {
            worst = worst.max((row.iter().sum::<f64>() - ai).abs());
        }
        for (j, bj) in b.iter().enumerate() {
            let s: f64 = self.plan.iter().map(|r| r[j]).sum();
            worst = worst.max((s - bj).abs());
        }
        worst
    }
}

pub(crate) fn cost_matrix(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> DMatrix<f64> {
    assert_eq!(mu.dim(), nu.dim(), "measures live in different dimensions");
    DMatrix::from_fn(mu.len(), nu.len(), |i, j| {
        let (x, y) = (mu.points()[i].as_slice(), nu.points()[j].as_slice());
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
    })
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with vertex potentials, O(n³)). Returns `σ` with row `i`
/// matched to column `σ[i]`.
pub fn assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[p[j] - 1] = j - 1;
    }
    sigma
}

fn transport_lp(a: &[f64], b: &[f64], c: &DMatrix<f64>) -> Result<Coupling> {
    let (n, m) = (a.len(), b.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> = (0..n)
        .map(|i| (0..m).map(|j| lp.add_var(c[(i, j)], (0.0, f64::INFINITY))).collect())
        .collect();
    for i in 0..n {
        let row: Vec<_> = (0..m).map(|j| (vars[i][j], 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, a[i]);
    }
    // One column constraint is implied by the others; dropping it keeps the
    // system full rank.
    for j in 0..m.saturating_sub(1) {
        let col: Vec<_> = (0..n).map(|i| (vars[i][j], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, b[j]);
    }
    let sol = lp
        .solve()
        .and_then(|o| o.into_solution().map_err(|_| microlp::Error::Infeasible))
        .map_err(|e| Error::Verification(format!("transportation LP failed: {e:?}")))?;
    let plan = vars
        .iter()
        .map(|row| row.iter().map(|v| sol[*v].max(0.0)).collect())
        .collect();
    Ok(Coupling { plan })
}

/// Optimal coupling for squared Euclidean cost.
pub fn optimal_coupling(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Coupling {
    let c = cost_matrix(mu, nu);
    let (n, m) = (mu.len(), nu.len());
    if n == m && mu.is_uniform() && nu.is_uniform() {
        let sigma = assignment(&c);
        let mut plan = vec![vec![0.0; m]; n];
        for (i, j) in sigma.into_iter().enumerate() {
            plan[i][j] = 1.0 / n as f64;
        }
        return Coupling { plan };
    }
    if n == 1 || m == 1 {
        let plan = (0..n)
            .map(|i| (0..m).map(|j| mu.weights()[i] * nu.weights()[j]).collect())
            .collect();
        return Coupling { plan };
    }
    transport_lp(mu.weights(), nu.weights(), &c)
        .expect("transportation LP on valid marginals is always feasible and bounded")
}

/// `W₂(μ, ν)` with ambient squared Euclidean ground cost.
///
/// Panics if the measures live in different dimensions.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let c = cost_matrix(mu, nu);
    let (n, m) = (mu.len(), nu.len());
    let total = if n == m && mu.is_uniform() && nu.is_uniform() {
        let sigma = assignment(&c);
        sigma.iter().enumerate().map(|(i, j)| c[(i, *j)]).sum::<f64>() / n as f64
    } else {
        optimal_coupling(mu, nu).cost(&c)
    };
    total.max(0.0).sqrt()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic optimal transport (log-domain Sinkhorn). Returns the square root
/// of the transport cost of the regularized plan.
pub fn wasserstein2_sinkhorn(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    reg: f64,
    max_iter: usize,
) -> Result<f64> {
    if !(reg > 0.0) {
        return Err(Error::Invalid(format!("regularization {reg} must be positive")));
    }
    let c = cost_matrix(mu, nu);
    let a: Vec<f64> = mu.weights().to_vec();
    let b: Vec<f64> = nu.weights().to_vec();
    let la: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let lb: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let (n, m) = (a.len(), b.len());
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut violation = f64::INFINITY;
    let log_plan = |f: &[f64], g: &[f64], i: usize, j: usize| {
        la[i] + lb[j] + (f[i] + g[j] - c[(i, j)]) / reg
    };
    for _ in 0..max_iter {
        for i in 0..n {
            if a[i] > 0.0 {
                f[i] = -reg * logsumexp((0..m).map(|j| lb[j] + (g[j] - c[(i, j)]) / reg));
            }
        }
        for j in 0..m {
            if b[j] > 0.0 {
                g[j] = -reg * logsumexp((0..n).map(|i| la[i] + (f[i] - c[(i, j)]) / reg));
            }
        }
        violation = (0..n)
            .map(|i| {
                let row: f64 = (0..m).map(|j| log_plan(&f, &g, i, j).exp()).sum();
                (row - a[i]).abs()
            })
            .sum();
        if violation <= tolerances::SINKHORN_MARGINAL {
            let mut cost = 0.0;
            for i in 0..n {
                for j in 0..m {
                    cost += log_plan(&f, &g, i, j).exp() * c[(i, j)];
                }
            }
            return Ok(cost.max(0.0).sqrt());
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        violation,
    })
}
