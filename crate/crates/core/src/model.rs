//! Synthetic two-class datasets and logistic-regression training.
//!
//! Parameters are laid out as `[w_0, .., w_{dim-1}, bias]`.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::params::{ParameterVector, ParamsError};
use crate::seeds::rng_from_seed;

/// Lower/upper clamp applied to predicted probabilities inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("dataset parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<Vec<f64>>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<u8>) -> Result<Self> {
        if features.is_empty() {
            return Err(ModelError::InvalidInput("dataset must hold at least one sample".into()));
        }
        if features.len() != labels.len() {
            return Err(ModelError::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        let dim = features[0].len();
        if dim == 0 {
            return Err(ModelError::InvalidInput("feature dim must be >= 1".into()));
        }
        for row in &features {
            if row.len() != dim {
                return Err(ModelError::Shape { expected: dim, actual: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidInput("non-finite feature".into()));
            }
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(ModelError::InvalidInput(format!("label {l} not in {{0,1}}")));
        }
        Ok(Self { features, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features[0].len()
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_parts(self) -> (Vec<Vec<f64>>, Vec<u8>) {
        (self.features, self.labels)
    }

    /// Returns a copy keeping only the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let features = indices.iter().map(|&i| self.features[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(features, labels)
    }

    /// One sample per line: `label,f_0,f_1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (row, label) in self.features.iter().zip(&self.labels) {
            write!(out, "{label}").unwrap();
            for v in row {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Dataset> {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| ModelError::Parse { line: i + 1, message };
            let mut fields = line.split(',');
            let label = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse::<u8>()
                .map_err(|e| parse_err(format!("label: {e}")))?;
            let row = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(format!("feature: {e}")))?;
            labels.push(label);
            features.push(row);
        }
        Dataset::new(features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    LogisticRegression,
}

impl ModelKind {
    fn tag(self) -> &'static [u8] {
        match self {
            ModelKind::LogisticRegression => b"logistic-regression",
        }
    }
}

/// The agreed model: architecture plus the digest every party checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    dim: usize,
    kind: ModelKind,
    hash: [u8; 32],
}

impl ModelSpec {
    pub fn new(dim: usize, kind: ModelKind) -> Result<Self> {
        if dim == 0 {
            return Err(ModelError::InvalidInput("model dim must be >= 1".into()));
        }
        let hash = Sha256::digest(Self::canonical(dim, kind)).into();
        Ok(Self { dim, kind, hash })
    }

    pub fn logistic(dim: usize) -> Result<Self> {
        Self::new(dim, ModelKind::LogisticRegression)
    }

    fn canonical(dim: usize, kind: ModelKind) -> Vec<u8> {
        let tag = kind.tag();
        let mut out = Vec::with_capacity(16 + tag.len());
        out.extend_from_slice(&(dim as u64).to_be_bytes());
        out.extend_from_slice(&(tag.len() as u64).to_be_bytes());
        out.extend_from_slice(tag);
        out
    }

    /// `dim ‖ model_kind`, length-prefixed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        Self::canonical(self.dim, self.kind)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn param_len(&self) -> usize {
        self.dim + 1
    }
}

/// Two unit-covariance Gaussian blobs centred at `∓margin` on the first axis.
///
/// Class 0 gets `n/2` samples, class 1 the rest; rows are shuffled.
pub fn gen_synthetic(seed: u64, n_samples: usize, dim: usize, margin: f64) -> Result<Dataset> {
    if n_samples < 2 {
        return Err(ModelError::InvalidInput("n_samples must be >= 2".into()));
    }
    if dim < 2 {
        return Err(ModelError::InvalidInput("dim must be >= 2".into()));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(ModelError::InvalidInput("margin must be finite and non-negative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let n0 = n_samples / 2;
    let mut labels: Vec<u8> = (0..n_samples).map(|i| u8::from(i >= n0)).collect();
    labels.shuffle(&mut rng);
    let features = labels
        .iter()
        .map(|&y| {
            let mut row: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            row[0] += if y == 1 { margin } else { -margin };
            row
        })
        .collect();
    Dataset::new(features, labels)
}

/// Uniform `[-0.01, 0.01]` weights plus bias, deterministic in `seed`.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng_from_seed(seed);
    let values = (0..spec.param_len())
        .map(|_| rng.random_range(-0.01..=0.01))
        .collect();
    ParameterVector::new(values).expect("finite by construction")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn logit(params: &[f64], x: &[f64]) -> f64 {
    let (w, b) = params.split_at(x.len());
    w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b[0]
}

/// Predicted probability of class 1.
pub fn predict_proba(params: &ParameterVector, x: &[f64]) -> f64 {
    sigmoid(logit(params.as_slice(), x))
}

/// Class prediction; `p = 0.5` resolves to class 1.
pub fn predict(params: &ParameterVector, x: &[f64]) -> u8 {
    u8::from(predict_proba(params, x) >= 0.5)
}

/// Clamped binary cross-entropy of a single sample.
pub fn sample_loss(params: &ParameterVector, x: &[f64], y: u8) -> f64 {
    let p = predict_proba(params, x).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Analytic gradient of the unclamped cross-entropy for one sample:
/// `(p − y) · [x, 1]`.
pub fn sample_gradient(params: &ParameterVector, x: &[f64], y: u8) -> Vec<f64> {
    let err = predict_proba(params, x) - f64::from(y);
    x.iter().map(|v| err * v).chain(std::iter::once(err)).collect()
}

fn check_shape(params: &ParameterVector, data: &Dataset) -> Result<()> {
    if params.dim() != data.dim() + 1 {
        return Err(ModelError::Shape {
            expected: data.dim() + 1,
            actual: params.dim(),
        });
    }
    Ok(())
}

/// Mini-batch SGD on binary cross-entropy, reshuffling every epoch.
pub fn local_train(
    start: &ParameterVector,
    data: &Dataset,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
) -> Result<ParameterVector> {
    check_shape(start, data)?;
    if batch == 0 {
        return Err(ModelError::InvalidInput("batch must be >= 1".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(ModelError::InvalidInput("lr must be finite and non-negative".into()));
    }
    let mut rng = rng_from_seed(seed);
    let mut params = start.as_slice().to_vec();
    let mut order: Vec<usize> = (0..data.size()).collect();
    let mut grad = vec![0.0; params.len()];
    let dim = data.dim();

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let x = &data.features[i];
                let err = sigmoid(logit(&params, x)) - f64::from(data.labels[i]);
                for (g, v) in grad[..dim].iter_mut().zip(x) {
                    *g += err * v;
                }
                grad[dim] += err;
            }
            let step = lr / chunk.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    Ok(ParameterVector::new(params)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean clamped cross-entropy and 0/1 accuracy at threshold 0.5.
pub fn evaluate(params: &ParameterVector, data: &Dataset) -> Result<Evaluation> {
    check_shape(params, data)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, &y) in data.features.iter().zip(&data.labels) {
        loss += sample_loss(params, x, y);
        if predict(params, x) == y {
            correct += 1;
        }
    }
    let n = data.size() as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
    })
}
