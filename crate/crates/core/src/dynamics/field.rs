//! Self-attention, the gated perceptron and the projected vector field.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{operator_norm, TransformerParams};
use crate::error::{Error, Result};
use crate::measures::EmpiricalMeasure;
use crate::sphere::UnitVector;

/// How the measure enters the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionMode {
    /// Softmax attention with logits `⟨Bx, x'⟩`.
    Full,
    /// Attention replaced by the plain mean `E_μ[z]`; every segment must have `B = 0`.
    Mean,
    /// `B` and the perceptron are recomputed from the leading measure at every
    /// stage; only `V` is read from the schedule.
    Feedback(FeedbackLaw),
}

/// Feedback controller: `B = β x⁺x⁺ᵀ`, perceptron `(⟨a,x⟩)₊ w(t)` with
/// `w(t) = (‖V‖x⁺ − V A_B[μ_leader(t)](x⁺)) / ⟨a,x⁺⟩₊`, which keeps `x⁺` fixed.
/// For `V = I` this is `(x⁺ − A(x⁺)) / ⟨a,x⁺⟩₊`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLaw {
    pub leader: usize,
    pub anchor: UnitVector,
    pub gate: UnitVector,
    pub beta: f64,
}

impl FeedbackLaw {
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let x = self.anchor.as_vector();
        x * x.transpose() * self.beta
    }

    /// The drift vector `w` for value matrix `v` and the leader's current atoms.
    pub fn drift(&self, v: &DMatrix<f64>, leader_points: &[f64], leader_weights: &[f64]) -> Result<Vec<f64>> {
        let d = self.anchor.dim();
        let xp = self.anchor.as_slice();
        let denom = dot(self.gate.as_slice(), xp);
        if denom <= 0.0 {
            return Err(Error::Invalid(
                "feedback gate must be positive at the anchor atom".into(),
            ));
        }
        let keys = transpose_apply_rows(&self.b_matrix(), leader_points, d);
        let mut a = vec![0.0; d];
        softmax_average(
            xp,
            leader_points,
            leader_weights,
            &keys,
            d,
            &mut a,
            &mut Vec::new(),
            &mut Vec::new(),
        );
        let va = v * DVector::from_vec(a);
        let scale = operator_norm(v);
        Ok((0..d).map(|k| (scale * xp[k] - va[k]) / denom).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fixed-point scale for order-independent sums of terms bounded by one.
const FIXED_SCALE: f64 = 1.2676506002282294e30; // 2^100

/// Sums terms of magnitude at most one exactly in 2^-100 fixed point, so the
/// result does not depend on the order of the terms.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct ExactSum(i128);

impl ExactSum {
    #[inline]
    pub(crate) fn add(&mut self, v: f64) {
        self.0 += (v * FIXED_SCALE).round() as i128;
    }

    #[inline]
    pub(crate) fn value(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

/// Softmax average `Σ w_j e^{⟨x, y_j⟩} x_j / Σ w_j e^{⟨x, y_j⟩}` where the keys
/// `y_j = Bᵀx_j` are given row-wise in `ys`.
#[allow(clippy::too_many_arguments)]
fn softmax_average(
    x: &[f64],
    points: &[f64],
    weights: &[f64],
    ys: &[f64],
    d: usize,
    out: &mut [f64],
    logits: &mut Vec<f64>,
    acc: &mut Vec<ExactSum>,
) {
    let n = weights.len();
    logits.clear();
    let mut max = f64::NEG_INFINITY;
    for j in 0..n {
        let l = dot(x, &ys[j * d..(j + 1) * d]);
        if weights[j] > 0.0 && l > max {
            max = l;
        }
        logits.push(l);
    }
    acc.clear();
    acc.resize(d + 1, ExactSum::default());
    for j in 0..n {
        if weights[j] <= 0.0 {
            continue;
        }
        let e = weights[j] * (logits[j] - max).exp();
        acc[d].add(e);
        for k in 0..d {
            acc[k].add(e * points[j * d + k]);
        }
    }
    let z = acc[d].value();
    for k in 0..d {
        out[k] = acc[k].value() / z;
    }
}

/// Self-attention `A_B[μ](x)`, stabilised by subtracting the largest logit.
pub fn attention(mu: &EmpiricalMeasure, b: &DMatrix<f64>, x: &UnitVector) -> DVector<f64> {
    let d = mu.dim();
    let flat = mu.flat();
    let ys = transpose_apply_rows(b, &flat, d);
    let mut out = vec![0.0; d];
    softmax_average(
        x.as_slice(),
        &flat,
        mu.weights(),
        &ys,
        d,
        &mut out,
        &mut Vec::new(),
        &mut Vec::new(),
    );
    DVector::from_vec(out)
}

/// Convex weights of [`attention`], one per atom.
pub fn attention_weights(mu: &EmpiricalMeasure, b: &DMatrix<f64>, x: &UnitVector) -> Vec<f64> {
    let bx = b * x.as_vector();
    let logits: Vec<f64> = mu.points().iter().map(|p| bx.dot(p.as_vector())).collect();
    let max = logits
        .iter()
        .zip(mu.weights())
        .filter(|(_, w)| **w > 0.0)
        .map(|(l, _)| *l)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logits
        .iter()
        .zip(mu.weights())
        .map(|(l, w)| if *w > 0.0 { w * (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|r| r / z).collect()
}

/// `y_j = Bᵀ x_j` for every row `x_j` of `flat`.
fn transpose_apply_rows(b: &DMatrix<f64>, flat: &[f64], d: usize) -> Vec<f64> {
    let mut ys = vec![0.0; flat.len()];
    for (x, y) in flat.chunks(d).zip(ys.chunks_mut(d)) {
        for a in 0..d {
            let mut s = 0.0;
            for c in 0..d {
                s += b[(c, a)] * x[c];
            }
            y[a] = s;
        }
    }
    ys
}

/// The projected field `P⊥ₓ(V·A + W·relu(Ux + b))` at `x`. In feedback mode
/// `mu` plays the role of the leading measure.
pub fn vector_field(
    mu: &EmpiricalMeasure,
    params: &TransformerParams,
    mode: &AttentionMode,
    x: &UnitVector,
) -> Result<DVector<f64>> {
    let d = mu.dim();
    if x.dim() != d || params.dim() != d {
        return Err(Error::Dimension {
            expected: d,
            found: if x.dim() != d { x.dim() } else { params.dim() },
        });
    }
    let kernel = Kernel::new(params, mode)?;
    let flat = mu.flat();
    let fb = match mode {
        AttentionMode::Feedback(law) => Some(law.drift(&params.v, &flat, mu.weights())?),
        _ => None,
    };
    let prep = kernel.prepare(&flat, mu.weights(), fb.as_deref());
    let mut out = vec![0.0; d];
    let mut scratch = Scratch::new(d);
    kernel.eval_point(x.as_slice(), &flat, mu.weights(), &prep, 1.0, &mut out, &mut scratch);
    Ok(DVector::from_vec(out))
}

/// Row-major copy of the blocks of one segment, ready for repeated evaluation.
#[derive(Debug, Clone)]
pub(crate) struct Kernel {
    d: usize,
    v: Option<Vec<f64>>,
    b_att: Option<DMatrix<f64>>,
    mean_mode: bool,
    u: Vec<f64>,
    bias: Vec<f64>,
    w: Vec<f64>,
    perceptron: bool,
    feedback_gate: Option<Vec<f64>>,
}

/// Per-evaluation data shared by all particles of one measure.
pub(crate) struct Prepared {
    /// `V·m` when attention does not depend on `x`.
    shared_attention: Option<Vec<f64>>,
    /// Rows `Bᵀx_j` for full attention.
    keys: Option<Vec<f64>>,
    feedback_drift: Option<Vec<f64>>,
}

pub(crate) struct Scratch {
    att: Vec<f64>,
    s: Vec<f64>,
    logits: Vec<f64>,
    acc: Vec<ExactSum>,
    relu: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            att: vec![0.0; d],
            s: vec![0.0; d],
            logits: Vec::new(),
            acc: Vec::new(),
            relu: vec![0.0; d],
        }
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

impl Kernel {
    pub(crate) fn new(params: &TransformerParams, mode: &AttentionMode) -> Result<Self> {
        let d = params.dim();
        let has_b = params.b_att.iter().any(|x| *x != 0.0);
        if matches!(mode, AttentionMode::Mean) && has_b {
            return Err(Error::Invalid("mean attention requires B = 0".into()));
        }
        let mut k = Kernel {
            d,
            v: params.has_attention().then(|| row_major(&params.v)),
            b_att: None,
            mean_mode: matches!(mode, AttentionMode::Mean),
            u: row_major(&params.u),
            bias: params.b.as_slice().to_vec(),
            w: row_major(&params.w),
            perceptron: params.has_perceptron(),
            feedback_gate: None,
        };
        match mode {
            AttentionMode::Full if has_b => k.b_att = Some(params.b_att.clone()),
            AttentionMode::Feedback(law) => {
                if law.anchor.dim() != d || law.gate.dim() != d {
                    return Err(Error::Dimension {
                        expected: d,
                        found: law.anchor.dim(),
                    });
                }
                k.b_att = Some(law.b_matrix());
                k.perceptron = true;
                k.feedback_gate = Some(law.gate.as_slice().to_vec());
            }
            _ => {}
        }
        Ok(k)
    }

    pub(crate) fn is_zero(&self) -> bool {
        self.v.is_none() && !self.perceptron
    }

    pub(crate) fn prepare(&self, points: &[f64], weights: &[f64], fb: Option<&[f64]>) -> Prepared {
        let d = self.d;
        let mut prep = Prepared {
            shared_attention: None,
            keys: None,
            feedback_drift: fb.map(<[f64]>::to_vec),
        };
        if let Some(v) = &self.v {
            match &self.b_att {
                Some(b) => prep.keys = Some(transpose_apply_rows(b, points, d)),
                None => {
                    let mut acc = vec![ExactSum::default(); d + 1];
                    for (x, w) in points.chunks(d).zip(weights) {
                        acc[d].add(*w);
                        for k in 0..d {
                            acc[k].add(w * x[k]);
                        }
                    }
                    let z = if self.mean_mode { 1.0 } else { acc[d].value() };
                    let m: Vec<f64> = acc[..d].iter().map(|a| a.value() / z).collect();
                    let vm = (0..d).map(|r| dot(&v[r * d..(r + 1) * d], &m)).collect();
                    prep.shared_attention = Some(vm);
                }
            }
        }
        prep
    }

    /// Field at one point, multiplied by `sign`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn eval_point(
        &self,
        x: &[f64],
        points: &[f64],
        weights: &[f64],
        prep: &Prepared,
        sign: f64,
        out: &mut [f64],
        sc: &mut Scratch,
    ) {
        let d = self.d;
        sc.s.iter_mut().for_each(|c| *c = 0.0);
        if let Some(vm) = &prep.shared_attention {
            sc.s.copy_from_slice(vm);
        } else if let (Some(v), Some(keys)) = (&self.v, &prep.keys) {
            softmax_average(
                x,
                points,
                weights,
                keys,
                d,
                &mut sc.att,
                &mut sc.logits,
                &mut sc.acc,
            );
            for r in 0..d {
                sc.s[r] = dot(&v[r * d..(r + 1) * d], &sc.att);
            }
        }
        if let Some(gate) = &self.feedback_gate {
            let g = dot(gate, x).max(0.0);
            if g > 0.0 {
                let w = prep.feedback_drift.as_ref().expect("feedback drift prepared");
                for r in 0..d {
                    sc.s[r] += g * w[r];
                }
            }
        } else if self.perceptron {
            let mut any = false;
            for k in 0..d {
                let r = (dot(&self.u[k * d..(k + 1) * d], x) + self.bias[k]).max(0.0);
                sc.relu[k] = r;
                any |= r > 0.0;
            }
            if any {
                for r in 0..d {
                    sc.s[r] += dot(&self.w[r * d..(r + 1) * d], &sc.relu);
                }
            }
        }
        let xs = dot(x, &sc.s);
        for k in 0..d {
            out[k] = sign * (sc.s[k] - xs * x[k]);
        }
    }

    /// Field for every particle of one measure.
    pub(crate) fn eval_measure(
        &self,
        xs: &[f64],
        weights: &[f64],
        fb: Option<&[f64]>,
        sign: f64,
        out: &mut [f64],
    ) {
        let d = self.d;
        let prep = self.prepare(xs, weights, fb);
        let n = weights.len();
        let heavy = prep.keys.is_some();
        if (heavy && n >= 48) || n >= 512 {
            out.par_chunks_mut(d)
                .zip(xs.par_chunks(d))
                .for_each_init(
                    || Scratch::new(d),
                    |sc, (o, x)| self.eval_point(x, xs, weights, &prep, sign, o, sc),
                );
        } else {
            let mut sc = Scratch::new(d);
            for (o, x) in out.chunks_mut(d).zip(xs.chunks(d)) {
                self.eval_point(x, xs, weights, &prep, sign, o, &mut sc);
            }
        }
    }
}

/// Upper bound on the Lipschitz constant of the field of one segment on the
/// sphere, used to pick the number of RK4 substeps.
pub(crate) fn lipschitz_bound(params: &TransformerParams, mode: &AttentionMode) -> f64 {
    let d = params.dim();
    let mut l = 0.0;
    if params.has_attention() {
        let nb = match mode {
            AttentionMode::Mean => 0.0,
            AttentionMode::Full => operator_norm(&params.b_att),
            AttentionMode::Feedback(law) => law.beta.abs(),
        };
        l += operator_norm(&params.v) * (2.0 + nb);
    }
    match mode {
        AttentionMode::Feedback(law) => {
            let denom = law.gate.dot(&law.anchor).max(1e-12);
            l += 4.0 * operator_norm(&params.v) / denom;
        }
        _ if params.has_perceptron() => {
            let mut g2 = 0.0;
            let mut m2 = 0.0;
            for k in 0..d {
                let nu = params.u.row(k).norm();
                let b = params.b[k];
                let (g, m) = if nu == 0.0 {
                    (0.0, b.max(0.0))
                } else {
                    let c = -b / nu;
                    if c >= 1.0 {
                        (0.0, 0.0)
                    } else if c <= -1.0 {
                        (nu, nu + b)
                    } else {
                        let r = c.acos().min(std::f64::consts::FRAC_PI_2);
                        (nu * r.sin(), nu + b)
                    }
                };
                g2 += g * g;
                m2 += m * m;
            }
            l += operator_norm(&params.w) * (g2.sqrt() + m2.sqrt());
        }
        _ => {}
    }
    l
}
