//! Poisoning adversaries: label flipping, trigger backdoors, and boosted
//! model replacement.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Dataset, ModelError};
use crate::params::{ParameterVector, ParamsError};
use crate::seeds::rng_from_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("trigger coordinate {index} outside feature dim {dim}")]
    Shape { index: usize, dim: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AdversaryError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversaryKind {
    #[default]
    None,
    LabelFlip,
    Backdoor,
    /// Trains on label-flipped data (share `fraction`) and submits the
    /// resulting delta scaled by `boost`.
    ModelReplacement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerCoord {
    pub index: usize,
    pub offset: f64,
}

/// Additive feature-offset pattern, the flat-vector analogue of a pixel patch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trigger(pub Vec<TriggerCoord>);

pub const DEFAULT_TRIGGER_OFFSET: f64 = 3.0;

impl Trigger {
    /// `+3.0` on the last two feature coordinates.
    pub fn default_for_dim(dim: usize) -> Self {
        Trigger(
            (dim.saturating_sub(2)..dim)
                .map(|index| TriggerCoord { index, offset: DEFAULT_TRIGGER_OFFSET })
                .collect(),
        )
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.0.iter().find(|c| c.index >= dim) {
            Some(c) => Err(AdversaryError::Shape { index: c.index, dim }),
            None => Ok(()),
        }
    }

    pub fn apply(&self, x: &mut [f64]) {
        for c in &self.0 {
            x[c.index] += c.offset;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarySpec {
    pub kind: AdversaryKind,
    pub fraction: f64,
    pub boost: f64,
    /// Resolved to [`Trigger::default_for_dim`] when absent.
    pub trigger: Option<Trigger>,
    pub target_label: u8,
}

impl Default for AdversarySpec {
    fn default() -> Self {
        Self {
            kind: AdversaryKind::None,
            fraction: 0.0,
            boost: 1.0,
            trigger: None,
            target_label: 1,
        }
    }
}

impl AdversarySpec {
    pub fn is_adversarial(&self) -> bool {
        self.kind != AdversaryKind::None
    }

    pub fn trigger_for_dim(&self, dim: usize) -> Trigger {
        self.trigger.clone().unwrap_or_else(|| Trigger::default_for_dim(dim))
    }

    pub fn validate(&self, feature_dim: usize) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.fraction) {
            errs.push(("fraction", format!("must lie in [0,1], got {}", self.fraction)));
        }
        if !(self.boost >= 1.0 && self.boost.is_finite()) {
            errs.push(("boost", format!("must be >= 1, got {}", self.boost)));
        }
        if self.target_label > 1 {
            errs.push(("target_label", format!("must be 0 or 1, got {}", self.target_label)));
        }
        if let Err(e) = self.trigger_for_dim(feature_dim).check_dim(feature_dim) {
            errs.push(("trigger", e.to_string()));
        }
        errs
    }

    /// Poisons a party's training data according to `kind`.
    pub fn poison_dataset(&self, data: &Dataset, seed: u64) -> Result<Dataset> {
        match self.kind {
            AdversaryKind::None => Ok(data.clone()),
            AdversaryKind::LabelFlip | AdversaryKind::ModelReplacement => label_flip(data, self.fraction, seed),
            AdversaryKind::Backdoor => backdoor_inject(
                data,
                &self.trigger_for_dim(data.dim()),
                self.target_label,
                self.fraction,
                seed,
            ),
        }
    }

    /// Boosting applies to model-replacement and backdoor attackers.
    pub fn transform_update(
        &self,
        trained: &ParameterVector,
        round_start_global: &ParameterVector,
    ) -> Result<ParameterVector> {
        match self.kind {
            AdversaryKind::ModelReplacement | AdversaryKind::Backdoor if self.boost != 1.0 => {
                model_replacement(trained, round_start_global, self.boost)
            }
            _ => Ok(trained.clone()),
        }
    }
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(AdversaryError::InvalidInput(format!("fraction must lie in [0,1], got {fraction}")));
    }
    Ok(())
}

fn chosen_rows(size: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let count = (fraction * size as f64).floor() as usize;
    let mut rng = rng_from_seed(seed);
    index::sample(&mut rng, size, count.min(size)).into_vec()
}

/// Flips the labels of `⌊fraction · size⌋` seeded-chosen samples.
pub fn label_flip(data: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    check_fraction(fraction)?;
    let (features, mut labels) = data.clone().into_parts();
    for i in chosen_rows(labels.len(), fraction, seed) {
        labels[i] ^= 1;
    }
    Ok(Dataset::new(features, labels)?)
}

/// Adds `trigger` to `⌊fraction · size⌋` seeded-chosen samples and relabels
/// them as `target_label`.
pub fn backdoor_inject(
    data: &Dataset,
    trigger: &Trigger,
    target_label: u8,
    fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    check_fraction(fraction)?;
    trigger.check_dim(data.dim())?;
    if target_label > 1 {
        return Err(AdversaryError::InvalidInput(format!("target label {target_label}")));
    }
    let (mut features, mut labels) = data.clone().into_parts();
    for i in chosen_rows(labels.len(), fraction, seed) {
        trigger.apply(&mut features[i]);
        labels[i] = target_label;
    }
    Ok(Dataset::new(features, labels)?)
}

/// `global + boost · (honest − global)`.
pub fn model_replacement(
    honest_update: &ParameterVector,
    round_start_global: &ParameterVector,
    boost: f64,
) -> Result<ParameterVector> {
    if !(boost > 0.0 && boost.is_finite()) {
        return Err(AdversaryError::InvalidInput(format!("boost must be positive, got {boost}")));
    }
    if boost == 1.0 {
        honest_update.check_dim(round_start_global)?;
        return Ok(honest_update.clone());
    }
    let delta = honest_update.sub(round_start_global)?;
    Ok(round_start_global.add(&delta.scale(boost)?)?)
}

/// Share of held-out samples not already in `target_label` that the model
/// assigns to `target_label` once the trigger is stamped on. `None` when
/// no such sample exists.
pub fn backdoor_success_rate(
    params: &ParameterVector,
    data: &Dataset,
    trigger: &Trigger,
    target_label: u8,
) -> Result<Option<f64>> {
    trigger.check_dim(data.dim())?;
    if params.dim() != data.dim() + 1 {
        return Err(ModelError::Shape { expected: data.dim() + 1, actual: params.dim() }.into());
    }
    let mut total = 0usize;
    let mut hits = 0usize;
    for (x, &y) in data.features().iter().zip(data.labels()) {
        if y == target_label {
            continue;
        }
        let mut stamped = x.clone();
        trigger.apply(&mut stamped);
        total += 1;
        if model::predict(params, &stamped) == target_label {
            hits += 1;
        }
    }
    Ok((total > 0).then(|| hits as f64 / total as f64))
}
