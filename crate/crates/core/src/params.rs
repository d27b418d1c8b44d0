//! Dense parameter-vector algebra: norms, distances and the federated
//! average functions used by the aggregator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: expected dim {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, ParamsError>;

/// Flat, ordered list of finite model weights.
///
/// Construction rejects empty and non-finite inputs, so every
/// `ParameterVector` in circulation satisfies `dim >= 1` and holds no
/// NaN/Inf entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ParamsError::InvalidInput("parameter vector must have dim >= 1".into()));
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(ParamsError::InvalidInput(format!(
                "non-finite entry {} at index {j}",
                values[j]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm(self)
    }

    /// Checks that `other` has the same dimension.
    pub fn check_dim(&self, other: &ParameterVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(ParamsError::Shape {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }

    /// `self - other`, coordinate-wise.
    pub fn sub(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, coordinate-wise.
    pub fn add(&self, other: &ParameterVector) -> Result<ParameterVector> {
        self.check_dim(other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    /// `self * factor`. Fails if the product overflows to a non-finite value.
    pub fn scale(&self, factor: f64) -> Result<ParameterVector> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = ParamsError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl<'de> Deserialize<'de> for ParameterVector {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        ParameterVector::new(values).map_err(serde::de::Error::custom)
    }
}

pub fn l2_norm(v: &ParameterVector) -> f64 {
    v.0.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm of a raw slice, for callers that have not validated their input yet.
pub fn try_l2_norm(values: &[f64]) -> Result<f64> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(ParamsError::InvalidInput(format!("non-finite entry {bad}")));
    }
    Ok(values.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Squared Euclidean distance `Σ (a_j − b_j)²`.
pub fn sq_distance(a: &ParameterVector, b: &ParameterVector) -> Result<f64> {
    a.check_dim(b)?;
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum())
}

fn check_batch(updates: &[ParameterVector], weights: &[f64]) -> Result<usize> {
    let first = updates
        .first()
        .ok_or_else(|| ParamsError::InvalidInput("empty update list".into()))?;
    if weights.len() != updates.len() {
        return Err(ParamsError::InvalidInput(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(ParamsError::InvalidInput("weights must be finite and non-negative".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(ParamsError::InvalidInput("total weight must be positive".into()));
    }
    for u in &updates[1..] {
        first.check_dim(u)?;
    }
    Ok(first.dim())
}

/// `(Σ w_i · V_i) / (Σ w_i)`.
pub fn weighted_mean(updates: &[ParameterVector], weights: &[f64]) -> Result<ParameterVector> {
    let dim = check_batch(updates, weights)?;
    let total: f64 = weights.iter().sum();
    let mut acc = vec![0.0; dim];
    for (u, &w) in updates.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(&u.0) {
            *a += w * v;
        }
    }
    ParameterVector::new(acc.into_iter().map(|a| a / total).collect())
}

/// Unweighted geometric median via Weiszfeld iteration.
pub fn geometric_median(
    updates: &[ParameterVector],
    tol: f64,
    max_iter: usize,
) -> Result<ParameterVector> {
    let ones = vec![1.0; updates.len()];
    weighted_geometric_median(updates, &ones, tol, max_iter)
}

/// Weighted Weiszfeld iteration minimising `Σ w_i ||x − V_i||`.
///
/// Starts from the weighted coordinate-wise mean and stops once an
/// iteration moves the estimate by at most `tol`, or after `max_iter`
/// iterations. When the iterate coincides with an input point, that
/// point's term is dropped for the iteration.
pub fn weighted_geometric_median(
    updates: &[ParameterVector],
    weights: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<ParameterVector> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(ParamsError::InvalidInput("tol must be positive".into()));
    }
    if max_iter == 0 {
        return Err(ParamsError::InvalidInput("max_iter must be positive".into()));
    }
    let dim = check_batch(updates, weights)?;
    let mut x = weighted_mean(updates, weights)?.into_vec();

    for _ in 0..max_iter {
        let mut num = vec![0.0; dim];
        let mut denom = 0.0;
        for (u, &w) in updates.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let d = x
                .iter()
                .zip(&u.0)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if d == 0.0 {
                continue;
            }
            let coef = w / d;
            denom += coef;
            for (n, v) in num.iter_mut().zip(&u.0) {
                *n += coef * v;
            }
        }
        if denom == 0.0 {
            // every weighted point sits on the iterate
            break;
        }
        let next: Vec<f64> = num.into_iter().map(|n| n / denom).collect();
        let step = next
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        x = next;
        if step <= tol {
            break;
        }
    }
    ParameterVector::new(x)
}

/// Objective minimised by the geometric median: `Σ ||x − V_i||`.
pub fn sum_of_distances(x: &ParameterVector, updates: &[ParameterVector]) -> Result<f64> {
    updates
        .iter()
        .map(|u| sq_distance(x, u).map(f64::sqrt))
        .sum()
}
