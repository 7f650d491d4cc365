//! Parameter tuples `θ = (V, B, W, U, b)` and piecewise-constant schedules.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sphere::UnitVector;

/// One constant parameter tuple. `V` mixes the attention output, `B` shapes
/// the attention logits, and `W·relu(U x + b)` is the gated perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    #[serde(with = "matrix_rows")]
    pub v: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub b_att: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub w: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub u: DMatrix<f64>,
    #[serde(with = "vector_items")]
    pub b: DVector<f64>,
}

impl TransformerParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            v: DMatrix::zeros(d, d),
            b_att: DMatrix::zeros(d, d),
            w: DMatrix::zeros(d, d),
            u: DMatrix::zeros(d, d),
            b: DVector::zeros(d),
        }
    }

    /// Attention-only parameters `V`, `B` with the perceptron switched off.
    pub fn attention(v: DMatrix<f64>, b_att: DMatrix<f64>) -> Self {
        let d = v.nrows();
        Self {
            v,
            b_att,
            ..Self::zeros(d)
        }
    }

    /// Constant drift `P⊥ₓ(scale · z)`: `U = 0`, `b = 𝟙`, `W𝟙 = scale · z`.
    pub fn constant_drift(z: &DVector<f64>, scale: f64) -> Self {
        let d = z.len();
        let mut p = Self::zeros(d);
        p.b = DVector::from_element(d, 1.0);
        p.w = spread_columns(&(z * scale));
        p
    }

    /// Gated drift `(⟨a,x⟩ − τ)₊ P⊥ₓ(scale · z)`: `U = 𝟙aᵀ`, `b = −τ𝟙`,
    /// `W𝟙 = scale · z`.
    pub fn gate(gate: &GateSpec, scale: f64) -> Self {
        let d = gate.a.dim();
        let mut p = Self::zeros(d);
        for r in 0..d {
            for c in 0..d {
                p.u[(r, c)] = gate.a.as_slice()[c];
            }
        }
        p.b = DVector::from_element(d, -gate.tau);
        p.w = spread_columns(&(gate.z.as_vector() * scale));
        p
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("V", &self.v), ("B", &self.b_att), ("W", &self.w), ("U", &self.u)] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Invalid(format!(
                    "block {name} is {}×{}, expected {d}×{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::Invalid(format!("block {name} has non-finite entries")));
            }
        }
        if self.b.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("bias has non-finite entries".into()));
        }
        Ok(())
    }

    /// Parameters of the negated vector field: `V` and `W` change sign,
    /// everything else is kept.
    pub fn negated(&self) -> Self {
        Self {
            v: -&self.v,
            w: -&self.w,
            ..self.clone()
        }
    }

    /// Multiply the field by `s > 0` (scales `V` and `W`).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            v: &self.v * s,
            w: &self.w * s,
            ..self.clone()
        }
    }

    /// Largest operator norm among the four matrix blocks and the bias norm.
    pub fn norm(&self) -> f64 {
        [&self.v, &self.b_att, &self.w, &self.u]
            .into_iter()
            .map(operator_norm)
            .fold(self.b.norm(), f64::max)
    }

    pub fn has_attention(&self) -> bool {
        self.v.iter().any(|x| *x != 0.0)
    }

    pub fn has_perceptron(&self) -> bool {
        self.w.iter().any(|x| *x != 0.0)
    }

    /// Flattened `V, B, W, U` (row-major) followed by `b`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(4 * self.dim() * self.dim() + self.dim());
        for m in [&self.v, &self.b_att, &self.w, &self.u] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push(m[(r, c)]);
                }
            }
        }
        out.extend(self.b.iter());
        out
    }

    pub fn unflatten(d: usize, xs: &[f64]) -> Result<Self> {
        if xs.len() != 4 * d * d + d {
            return Err(Error::Format(format!(
                "expected {} parameter values for d = {d}, found {}",
                4 * d * d + d,
                xs.len()
            )));
        }
        let block = |k: usize| DMatrix::from_row_slice(d, d, &xs[k * d * d..(k + 1) * d * d]);
        Ok(Self {
            v: block(0),
            b_att: block(1),
            w: block(2),
            u: block(3),
            b: DVector::from_column_slice(&xs[4 * d * d..]),
        })
    }
}

/// `W` with every column equal to `z / d`, so that `W𝟙 = z`.
fn spread_columns(z: &DVector<f64>) -> DMatrix<f64> {
    let d = z.len();
    DMatrix::from_fn(d, d, |r, _| z[r] / d as f64)
}

pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0, |a: f64, b| a.max(*b))
}

/// Rank-one perceptron gate `x ↦ (⟨a,x⟩ − τ)₊ P⊥ₓ z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub a: UnitVector,
    pub tau: f64,
    pub z: UnitVector,
}

impl GateSpec {
    /// Gate value `(⟨a,x⟩ − τ)₊`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let s: f64 = self.a.as_slice().iter().zip(x).map(|(a, b)| a * b).sum();
        (s - self.tau).max(0.0)
    }

    /// Gate that is positive exactly on the open cap `B(center, radius)`.
    pub fn inside_cap(center: &UnitVector, radius: f64, z: UnitVector) -> Self {
        Self {
            a: center.clone(),
            tau: radius.cos(),
            z,
        }
    }

    /// Gate that is positive exactly outside the closed cap `B(center, radius)`.
    pub fn outside_cap(center: &UnitVector, radius: f64, z: UnitVector) -> Self {
        Self {
            a: center.neg(),
            tau: -radius.cos(),
            z,
        }
    }
}

/// A constant-parameter time interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub t_start: f64,
    pub t_end: f64,
    pub params: TransformerParams,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }
}

/// Piecewise-constant parameters tiling `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSchedule {
    pub segments: Vec<Segment>,
    pub horizon: f64,
}

impl ParamSchedule {
    /// A single zero-parameter segment over `[0, horizon]`.
    pub fn identity(d: usize, horizon: f64) -> Self {
        Self {
            segments: vec![Segment {
                t_start: 0.0,
                t_end: horizon,
                params: TransformerParams::zeros(d),
            }],
            horizon,
        }
    }

    /// Contiguous segments with the given durations, starting at 0.
    pub fn from_durations(pieces: Vec<(f64, TransformerParams)>) -> Result<Self> {
        let mut t = 0.0;
        let mut segments = Vec::with_capacity(pieces.len());
        for (dt, params) in pieces {
            segments.push(Segment {
                t_start: t,
                t_end: t + dt,
                params,
            });
            t += dt;
        }
        let s = Self {
            segments,
            horizon: t,
        };
        s.check()?;
        Ok(s)
    }

    /// Split `[0, horizon]` into equal-length segments, one per parameter
    /// tuple. The last segment ends exactly at `horizon`.
    pub fn equal_split(horizon: f64, params: Vec<TransformerParams>) -> Result<Self> {
        let k = params.len();
        if k == 0 {
            return Err(Error::Invalid("a schedule needs at least one segment".into()));
        }
        let segments = params
            .into_iter()
            .enumerate()
            .map(|(i, p)| Segment {
                t_start: horizon * i as f64 / k as f64,
                t_end: if i + 1 == k {
                    horizon
                } else {
                    horizon * (i + 1) as f64 / k as f64
                },
                params: p,
            })
            .collect();
        let s = Self { segments, horizon };
        s.check()?;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.segments[0].params.dim()
    }

    pub fn switch_count(&self) -> usize {
        self.segments.len().saturating_sub(1)
    }

    /// Sup over segments of [`TransformerParams::norm`].
    pub fn param_norm(&self) -> f64 {
        self.segments.iter().map(|s| s.params.norm()).fold(0.0, f64::max)
    }

    pub fn shortest_segment(&self) -> f64 {
        self.segments
            .iter()
            .map(Segment::duration)
            .fold(f64::INFINITY, f64::min)
    }

    /// True when every segment has zero `V` and zero `W`.
    pub fn is_identity(&self) -> bool {
        self.segments
            .iter()
            .all(|s| !s.params.has_attention() && !s.params.has_perceptron())
    }

    pub fn is_perceptron_only(&self) -> bool {
        self.segments.iter().all(|s| !s.params.has_attention())
    }

    /// Check the tiling and block shapes.
    pub fn check(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Invalid("a schedule needs at least one segment".into()));
        }
        let d = self.segments[0].params.dim();
        let mut t = 0.0;
        for (k, s) in self.segments.iter().enumerate() {
            s.params.check()?;
            if s.params.dim() != d {
                return Err(Error::Dimension {
                    expected: d,
                    found: s.params.dim(),
                });
            }
            if s.t_start != t {
                return Err(Error::Invalid(format!(
                    "segment {k} starts at {} but the previous one ends at {t}",
                    s.t_start
                )));
            }
            if !(s.t_end > s.t_start) || !s.t_end.is_finite() {
                return Err(Error::Invalid(format!(
                    "segment {k} has empty or invalid interval [{}, {}]",
                    s.t_start, s.t_end
                )));
            }
            t = s.t_end;
        }
        if t != self.horizon {
            return Err(Error::Invalid(format!(
                "segments end at {t} but the horizon is {}",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Run `self` then `other`.
    pub fn concat(&self, other: &ParamSchedule) -> ParamSchedule {
        let mut segments = self.segments.clone();
        let mut t = self.horizon;
        for s in &other.segments {
            let dt = s.duration();
            segments.push(Segment {
                t_start: t,
                t_end: t + dt,
                params: s.params.clone(),
            });
            t += dt;
        }
        ParamSchedule {
            segments,
            horizon: t,
        }
    }

    /// Concatenate several schedules in order.
    pub fn chain<'a>(parts: impl IntoIterator<Item = &'a ParamSchedule>) -> Option<ParamSchedule> {
        let mut it = parts.into_iter();
        let first = it.next()?.clone();
        Some(it.fold(first, |acc, s| acc.concat(s)))
    }

    /// Snap the end of the last segment and the horizon to `horizon`, which
    /// must agree with the current horizon up to accumulated rounding.
    pub fn with_horizon(mut self, horizon: f64) -> Result<ParamSchedule> {
        if (self.horizon - horizon).abs() > 1e-9 * horizon.abs().max(1.0) {
            return Err(Error::Invalid(format!(
                "horizon {} cannot be snapped to {horizon}",
                self.horizon
            )));
        }
        if let Some(last) = self.segments.last_mut() {
            last.t_end = horizon;
        }
        self.horizon = horizon;
        self.check()?;
        Ok(self)
    }

    /// Schedule whose forward flow is the inverse of `self`'s forward flow:
    /// segments in reverse order with negated fields.
    pub fn reversed(&self) -> ParamSchedule {
        let pieces = self
            .segments
            .iter()
            .rev()
            .map(|s| (s.duration(), s.params.negated()))
            .collect();
        ParamSchedule::from_durations(pieces).expect("reversal of a valid schedule is valid")
    }

    /// Same parameters with every duration multiplied by `c` and every field
    /// divided by `c`; the flow map over the whole schedule is unchanged.
    pub fn reparametrized(&self, c: f64) -> ParamSchedule {
        let pieces = self
            .segments
            .iter()
            .map(|s| (s.duration() * c, s.params.scaled(1.0 / c)))
            .collect();
        ParamSchedule::from_durations(pieces).expect("positive rescaling keeps validity")
    }
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(D::Error::custom("matrix must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
    }
}

mod vector_items {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
