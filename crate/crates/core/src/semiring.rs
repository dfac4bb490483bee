//! Commutative semi-rings used as tuple annotations.
//!
//! Every aggregate the engine computes is annotation arithmetic: joins
//! multiply annotations (⊗) and group-bys add them (⊕). Because ⊗ distributes
//! over ⊕, marginalization can be pushed below joins.
//!
//! | kind            | ⊕    | ⊗        | 0    | 1     |
//! |-----------------|------|----------|------|-------|
//! | `NaturalCount`  | +    | ×        | 0    | 1     |
//! | `RealSum`       | +    | ×        | 0.0  | 1.0   |
//! | `CountSumPair`  | pairwise + | (c₁c₂, c₁s₂+c₂s₁) | (0,0) | (1,0) |
//! | `TropicalMin`   | min  | +        | +∞   | 0     |
//! | `TropicalMax`   | max  | +        | −∞   | 0     |
//! | `Gram`          | +    | covariance product | 0 | e₀₀ |
//!
//! A gram annotation over `f` features and one target is the symmetric
//! `(f+2)×(f+2)` matrix of degree ≤ 2 monomial sums over the vector
//! `(1, x₁, …, x_f, y)`. Entry `[0][0]` is the count.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::Value;

/// Default ridge term added to the feature diagonal of the normal equations.
pub const DEFAULT_RIDGE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SemiringKind {
    NaturalCount,
    RealSum,
    CountSumPair,
    TropicalMin,
    TropicalMax,
    /// `vars` = features + target; the matrix dimension is `vars + 1`.
    Gram { vars: usize },
}

impl fmt::Display for SemiringKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemiringKind::Gram { vars } => write!(f, "Gram({vars})"),
            other => write!(f, "{other:?}"),
        }
    }
}

/// Aggregate definition of a query: the semiring plus the lift rule that turns
/// base tuples into annotations.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SemiringSpec {
    Count,
    Sum { attr: String },
    CountSum { attr: String },
    Min { attr: String },
    Max { attr: String },
    Gram { features: Vec<String>, target: String },
}

impl Default for SemiringSpec {
    fn default() -> Self {
        SemiringSpec::Count
    }
}

impl SemiringSpec {
    pub fn kind(&self) -> SemiringKind {
        match self {
            SemiringSpec::Count => SemiringKind::NaturalCount,
            SemiringSpec::Sum { .. } => SemiringKind::RealSum,
            SemiringSpec::CountSum { .. } => SemiringKind::CountSumPair,
            SemiringSpec::Min { .. } => SemiringKind::TropicalMin,
            SemiringSpec::Max { .. } => SemiringKind::TropicalMax,
            SemiringSpec::Gram { features, .. } => SemiringKind::Gram { vars: features.len() + 1 },
        }
    }

    /// Attributes consumed by the lift, in slot order.
    pub fn lift_attrs(&self) -> Vec<&str> {
        match self {
            SemiringSpec::Count => vec![],
            SemiringSpec::Sum { attr }
            | SemiringSpec::CountSum { attr }
            | SemiringSpec::Min { attr }
            | SemiringSpec::Max { attr } => vec![attr.as_str()],
            SemiringSpec::Gram { features, target } => features
                .iter()
                .map(String::as_str)
                .chain(std::iter::once(target.as_str()))
                .collect(),
        }
    }

    pub fn zero(&self) -> Annotation {
        Annotation::zero(self.kind())
    }

    pub fn one(&self) -> Annotation {
        Annotation::one(self.kind())
    }

    /// Lifts a tuple; every lift attribute must be present and numeric.
    pub fn lift(&self, get: impl Fn(&str) -> Option<Value>) -> Result<Annotation> {
        self.lift_with(get, true)
    }

    /// Lifts the part of a tuple owned by one relation of a join: absent lift
    /// attributes contribute the ⊗-identity, so the product over all joined
    /// relations equals the lift of the joined tuple.
    pub fn lift_partial(&self, get: impl Fn(&str) -> Option<Value>) -> Result<Annotation> {
        self.lift_with(get, false)
    }

    fn lift_with(&self, get: impl Fn(&str) -> Option<Value>, strict: bool) -> Result<Annotation> {
        let read = |name: &str| -> Result<Option<f64>> {
            match get(name) {
                Some(v) => v.as_f64().map(Some).ok_or_else(|| Error::NonNumericLift {
                    attr: name.to_string(),
                    value: v.to_string(),
                }),
                None if strict => Err(Error::MissingLiftAttribute(name.to_string())),
                None => Ok(None),
            }
        };
        Ok(match self {
            SemiringSpec::Count => Annotation::Count(1),
            SemiringSpec::Sum { attr } => Annotation::Real(read(attr)?.unwrap_or(1.0)),
            SemiringSpec::CountSum { attr } => Annotation::CountSum {
                count: 1,
                sum: read(attr)?.unwrap_or(0.0),
            },
            SemiringSpec::Min { attr } => {
                Annotation::Min(Extended::Finite(read(attr)?.unwrap_or(0.0)))
            }
            SemiringSpec::Max { attr } => {
                Annotation::Max(Extended::Finite(read(attr)?.unwrap_or(0.0)))
            }
            SemiringSpec::Gram { features, target } => {
                let mut v = Vec::with_capacity(features.len() + 2);
                v.push(1.0);
                for name in features.iter().chain(std::iter::once(target)) {
                    v.push(read(name)?.unwrap_or(0.0));
                }
                Annotation::Gram(Box::new(Gram::outer(&v)))
            }
        })
    }
}

/// A real number or the tropical zero (+∞ for min, −∞ for max).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Extended {
    Finite(f64),
    Infinite,
}

impl Extended {
    fn plus(self, other: Extended) -> Extended {
        match (self, other) {
            (Extended::Finite(a), Extended::Finite(b)) => Extended::Finite(a + b),
            _ => Extended::Infinite,
        }
    }
}

/// Dense symmetric matrix of monomial sums.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gram {
    dim: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn zeros(dim: usize) -> Gram {
        Gram { dim, data: vec![0.0; dim * dim] }
    }

    pub fn outer(v: &[f64]) -> Gram {
        let dim = v.len();
        let mut data = Vec::with_capacity(dim * dim);
        for a in v {
            for b in v {
                data.push(a * b);
            }
        }
        Gram { dim, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Gram {
        let dim = rows.len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Gram { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn count(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    fn add(&self, other: &Gram) -> Gram {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Gram { dim: self.dim, data }
    }

    /// Covariance-ring product. With `c` the count, `s` the linear sums and
    /// `Q` the quadratic block:
    /// `(c₁c₂, c₂s₁ + c₁s₂, c₂Q₁ + c₁Q₂ + s₁s₂ᵀ + s₂s₁ᵀ)`.
    fn mul(&self, other: &Gram) -> Gram {
        let n = self.dim;
        let (c1, c2) = (self.get(0, 0), other.get(0, 0));
        let mut out = Gram::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let v = match (i, j) {
                    (0, 0) => c1 * c2,
                    (0, k) | (k, 0) => c2 * self.get(0, k) + c1 * other.get(0, k),
                    (p, q) => {
                        c2 * self.get(p, q)
                            + c1 * other.get(p, q)
                            + self.get(0, p) * other.get(0, q)
                            + other.get(0, p) * self.get(0, q)
                    }
                };
                out.data[i * n + j] = v;
            }
        }
        out
    }

    /// Re-indexes into a larger variable space. `positions[i]` is the new
    /// index of old variable `i` (index 0, the constant, must map to 0).
    pub fn embed(&self, new_dim: usize, positions: &[usize]) -> Gram {
        assert_eq!(positions.len(), self.dim);
        assert_eq!(positions[0], 0);
        let mut out = Gram::zeros(new_dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.data[positions[i] * new_dim + positions[j]] = self.get(i, j);
            }
        }
        out
    }
}

/// One semi-ring element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Annotation {
    Count(u64),
    Real(f64),
    CountSum { count: u64, sum: f64 },
    Min(Extended),
    Max(Extended),
    Gram(Box<Gram>),
}

impl Annotation {
    pub fn zero(kind: SemiringKind) -> Annotation {
        match kind {
            SemiringKind::NaturalCount => Annotation::Count(0),
            SemiringKind::RealSum => Annotation::Real(0.0),
            SemiringKind::CountSumPair => Annotation::CountSum { count: 0, sum: 0.0 },
            SemiringKind::TropicalMin => Annotation::Min(Extended::Infinite),
            SemiringKind::TropicalMax => Annotation::Max(Extended::Infinite),
            SemiringKind::Gram { vars } => Annotation::Gram(Box::new(Gram::zeros(vars + 1))),
        }
    }

    pub fn one(kind: SemiringKind) -> Annotation {
        match kind {
            SemiringKind::NaturalCount => Annotation::Count(1),
            SemiringKind::RealSum => Annotation::Real(1.0),
            SemiringKind::CountSumPair => Annotation::CountSum { count: 1, sum: 0.0 },
            SemiringKind::TropicalMin => Annotation::Min(Extended::Finite(0.0)),
            SemiringKind::TropicalMax => Annotation::Max(Extended::Finite(0.0)),
            SemiringKind::Gram { vars } => {
                let mut g = Gram::zeros(vars + 1);
                g.data[0] = 1.0;
                Annotation::Gram(Box::new(g))
            }
        }
    }

    pub fn kind(&self) -> SemiringKind {
        match self {
            Annotation::Count(_) => SemiringKind::NaturalCount,
            Annotation::Real(_) => SemiringKind::RealSum,
            Annotation::CountSum { .. } => SemiringKind::CountSumPair,
            Annotation::Min(_) => SemiringKind::TropicalMin,
            Annotation::Max(_) => SemiringKind::TropicalMax,
            Annotation::Gram(g) => SemiringKind::Gram { vars: g.dim - 1 },
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Annotation::Count(c) => *c == 0,
            Annotation::Real(x) => *x == 0.0,
            Annotation::CountSum { count, sum } => *count == 0 && *sum == 0.0,
            Annotation::Min(e) | Annotation::Max(e) => *e == Extended::Infinite,
            Annotation::Gram(g) => g.data.iter().all(|x| *x == 0.0),
        }
    }

    fn check(&self, other: &Annotation) -> Result<()> {
        if self.kind() == other.kind() {
            Ok(())
        } else {
            Err(Error::KindMismatch { left: self.kind(), right: other.kind() })
        }
    }

    /// ⊕
    pub fn combine(&self, other: &Annotation) -> Result<Annotation> {
        self.check(other)?;
        Ok(self.add_unchecked(other))
    }

    /// ⊗
    pub fn multiply(&self, other: &Annotation) -> Result<Annotation> {
        self.check(other)?;
        Ok(self.mul_unchecked(other))
    }

    /// ⊕ for operands already known to share a kind.
    pub(crate) fn add_unchecked(&self, other: &Annotation) -> Annotation {
        match (self, other) {
            (Annotation::Count(a), Annotation::Count(b)) => Annotation::Count(a + b),
            (Annotation::Real(a), Annotation::Real(b)) => Annotation::Real(a + b),
            (
                Annotation::CountSum { count: c1, sum: s1 },
                Annotation::CountSum { count: c2, sum: s2 },
            ) => Annotation::CountSum { count: c1 + c2, sum: s1 + s2 },
            (Annotation::Min(a), Annotation::Min(b)) => Annotation::Min(match (a, b) {
                (Extended::Finite(x), Extended::Finite(y)) => Extended::Finite(x.min(*y)),
                (Extended::Infinite, e) | (e, Extended::Infinite) => *e,
            }),
            (Annotation::Max(a), Annotation::Max(b)) => Annotation::Max(match (a, b) {
                (Extended::Finite(x), Extended::Finite(y)) => Extended::Finite(x.max(*y)),
                (Extended::Infinite, e) | (e, Extended::Infinite) => *e,
            }),
            (Annotation::Gram(a), Annotation::Gram(b)) if a.dim == b.dim => {
                Annotation::Gram(Box::new(a.add(b)))
            }
            (a, b) => panic!("semiring kind mismatch: {} vs {}", a.kind(), b.kind()),
        }
    }

    pub(crate) fn add_assign_unchecked(&mut self, other: &Annotation) {
        match (&mut *self, other) {
            (Annotation::Count(a), Annotation::Count(b)) => *a += b,
            (Annotation::Real(a), Annotation::Real(b)) => *a += b,
            (Annotation::Gram(a), Annotation::Gram(b)) if a.dim == b.dim => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x += y;
                }
            }
            _ => *self = self.add_unchecked(other),
        }
    }

    pub(crate) fn mul_unchecked(&self, other: &Annotation) -> Annotation {
        match (self, other) {
            (Annotation::Count(a), Annotation::Count(b)) => Annotation::Count(a * b),
            (Annotation::Real(a), Annotation::Real(b)) => Annotation::Real(a * b),
            (
                Annotation::CountSum { count: c1, sum: s1 },
                Annotation::CountSum { count: c2, sum: s2 },
            ) => Annotation::CountSum {
                count: c1 * c2,
                sum: *c1 as f64 * s2 + *c2 as f64 * s1,
            },
            (Annotation::Min(a), Annotation::Min(b)) => Annotation::Min(a.plus(*b)),
            (Annotation::Max(a), Annotation::Max(b)) => Annotation::Max(a.plus(*b)),
            (Annotation::Gram(a), Annotation::Gram(b)) if a.dim == b.dim => {
                Annotation::Gram(Box::new(a.mul(b)))
            }
            (a, b) => panic!("semiring kind mismatch: {} vs {}", a.kind(), b.kind()),
        }
    }

    /// Equality with relative tolerance on real-valued components; counts are
    /// compared exactly.
    pub fn approx_eq(&self, other: &Annotation, rel: f64) -> bool {
        fn close(a: f64, b: f64, rel: f64) -> bool {
            if a == b {
                return true;
            }
            (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
        }
        fn ext(a: &Extended, b: &Extended, rel: f64) -> bool {
            match (a, b) {
                (Extended::Finite(x), Extended::Finite(y)) => close(*x, *y, rel),
                (Extended::Infinite, Extended::Infinite) => true,
                _ => false,
            }
        }
        match (self, other) {
            (Annotation::Count(a), Annotation::Count(b)) => a == b,
            (Annotation::Real(a), Annotation::Real(b)) => close(*a, *b, rel),
            (
                Annotation::CountSum { count: c1, sum: s1 },
                Annotation::CountSum { count: c2, sum: s2 },
            ) => c1 == c2 && close(*s1, *s2, rel),
            (Annotation::Min(a), Annotation::Min(b)) | (Annotation::Max(a), Annotation::Max(b)) => {
                ext(a, b, rel)
            }
            (Annotation::Gram(a), Annotation::Gram(b)) => {
                a.dim == b.dim && a.data.iter().zip(&b.data).all(|(x, y)| close(*x, *y, rel))
            }
            _ => false,
        }
    }

    /// Scalar view used for reporting: count, sum, mean for pairs, the
    /// extremum for tropical kinds, and the count for gram matrices.
    pub fn scalar(&self) -> Option<f64> {
        match self {
            Annotation::Count(c) => Some(*c as f64),
            Annotation::Real(x) => Some(*x),
            Annotation::CountSum { count, sum } => Some(sum / *count as f64),
            Annotation::Min(Extended::Finite(x)) | Annotation::Max(Extended::Finite(x)) => Some(*x),
            Annotation::Min(Extended::Infinite) | Annotation::Max(Extended::Infinite) => None,
            Annotation::Gram(g) => Some(g.count()),
        }
    }

    pub fn as_gram(&self) -> Option<&Gram> {
        match self {
            Annotation::Gram(g) => Some(g),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        use serde_json::json;
        let ext = |e: &Extended| match e {
            Extended::Finite(x) => json!(x),
            Extended::Infinite => serde_json::Value::Null,
        };
        match self {
            Annotation::Count(c) => json!(c),
            Annotation::Real(x) => json!(x),
            Annotation::CountSum { count, sum } => json!({ "count": count, "sum": sum }),
            Annotation::Min(e) | Annotation::Max(e) => ext(e),
            Annotation::Gram(g) => json!(g.rows()),
        }
    }
}

/// Least-squares model solved from a gram annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub weights: Vec<f64>,
}

impl LinearModel {
    /// Coefficient vector `(intercept, w₁, …, w_f)`.
    pub fn coefficients(&self) -> Vec<f64> {
        std::iter::once(self.intercept).chain(self.weights.iter().copied()).collect()
    }

    /// Coefficient of determination of this model on the data summarized by
    /// `gram`, computed from the monomial sums alone.
    pub fn r2(&self, gram: &Gram) -> f64 {
        let t = gram.dim() - 1;
        let beta = self.coefficients();
        let n = gram.count();
        let sum_y = gram.get(0, t);
        let sum_yy = gram.get(t, t);
        let mut xty = 0.0;
        let mut xtx = 0.0;
        for i in 0..t {
            xty += beta[i] * gram.get(i, t);
            for j in 0..t {
                xtx += beta[i] * beta[j] * gram.get(i, j);
            }
        }
        let sse = sum_yy - 2.0 * xty + xtx;
        let sst = sum_yy - sum_y * sum_y / n;
        if sst <= 0.0 {
            return 0.0;
        }
        1.0 - sse / sst
    }
}

/// Solves the normal equations `(XᵀX + εI_features) β = Xᵀy` read off the gram
/// matrix, with an intercept column.
pub fn solve_linreg(gram: &Annotation, ridge: f64) -> Result<LinearModel> {
    let g = gram.as_gram().ok_or_else(|| Error::KindMismatch {
        left: gram.kind(),
        right: SemiringKind::Gram { vars: 1 },
    })?;
    let t = g.dim() - 1;
    let a = DMatrix::from_fn(t, t, |i, j| {
        let v = g.get(i, j);
        if i == j && i > 0 {
            v + ridge
        } else {
            v
        }
    });
    let b = DVector::from_fn(t, |i, _| g.get(i, t));
    let scale = (0..t).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let chol = a.cholesky().ok_or(Error::Singular { ridge })?;
    // near-zero pivots mean the system is numerically rank deficient
    let l = chol.l_dirty();
    if (0..t).any(|i| l[(i, i)] * l[(i, i)] <= scale * 1e-12) {
        return Err(Error::Singular { ridge });
    }
    let beta = chol.solve(&b);
    if beta.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular { ridge });
    }
    Ok(LinearModel { intercept: beta[0], weights: beta.iter().skip(1).copied().collect() })
}
