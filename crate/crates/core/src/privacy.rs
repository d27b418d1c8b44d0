//! Differential-privacy defense stack applied before an update is sealed:
//! L2 clipping, Gaussian noise, and magnitude pruning.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParameterVector, ParamsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Defaults are tuning choices, not recommended privacy parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpConfig {
    pub enabled: bool,
    pub clip_bound: f64,
    pub noise_sigma: f64,
    pub prune_threshold: f64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            clip_bound: 1.0,
            noise_sigma: 0.01,
            prune_threshold: 1e-3,
        }
    }
}

impl DpConfig {
    pub fn validate(&self) -> Vec<(&'static str, String)> {
        let mut errs = Vec::new();
        if !self.clip_bound.is_finite() || (self.enabled && self.clip_bound <= 0.0) {
            errs.push(("clip_bound", format!("must be > 0 when enabled, got {}", self.clip_bound)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            errs.push(("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold.is_finite()) {
            errs.push(("prune_threshold", format!("must be >= 0, got {}", self.prune_threshold)));
        }
        errs
    }
}

/// Rescales `v` onto the radius-`bound` ball when it lies outside.
pub fn clip(v: &ParameterVector, bound: f64) -> Result<ParameterVector> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(PrivacyError::InvalidInput(format!("clip bound must be > 0, got {bound}")));
    }
    let norm = v.l2_norm();
    if norm <= bound {
        return Ok(v.clone());
    }
    Ok(v.scale(bound / norm)?)
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(
    v: &ParameterVector,
    sigma: f64,
    rng: &mut R,
) -> Result<ParameterVector> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(PrivacyError::InvalidInput(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(v.clone());
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| PrivacyError::InvalidInput(format!("noise sigma {sigma}: {e}")))?;
    let values = v.as_slice().iter().map(|x| x + normal.sample(rng)).collect();
    Ok(ParameterVector::new(values)?)
}

/// Zeroes coordinates with `|v_j| < threshold`.
pub fn prune_gradients(v: &ParameterVector, threshold: f64) -> Result<ParameterVector> {
    if threshold.is_nan() || threshold < 0.0 {
        return Err(PrivacyError::InvalidInput(format!("prune threshold must be >= 0, got {threshold}")));
    }
    let values = v
        .as_slice()
        .iter()
        .map(|&x| if x.abs() < threshold { 0.0 } else { x })
        .collect();
    Ok(ParameterVector::new(values)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Train,
    Clip,
    Noise,
    Prune,
    Encrypt,
}

/// Required submission order.
pub const PIPELINE_ORDER: [Stage; 5] = [Stage::Train, Stage::Clip, Stage::Noise, Stage::Prune, Stage::Encrypt];

/// Runs clip → noise → prune on the delta `trained − global` and re-adds
/// `global`. Stages are appended to `trace`. A disabled config passes the
/// trained vector through and records no DP stages.
pub fn privatize_update<R: Rng + ?Sized>(
    trained: &ParameterVector,
    global: &ParameterVector,
    cfg: &DpConfig,
    rng: &mut R,
    trace: &mut Vec<Stage>,
) -> Result<ParameterVector> {
    if !cfg.enabled {
        return Ok(trained.clone());
    }
    let delta = trained.sub(global)?;
    let delta = clip(&delta, cfg.clip_bound)?;
    trace.push(Stage::Clip);
    let delta = add_gaussian_noise(&delta, cfg.noise_sigma, rng)?;
    trace.push(Stage::Noise);
    let delta = prune_gradients(&delta, cfg.prune_threshold)?;
    trace.push(Stage::Prune);
    Ok(global.add(&delta)?)
}

/// True when `trace` is an in-order subsequence of [`PIPELINE_ORDER`] that
/// starts with training and ends with encryption.
pub fn is_valid_pipeline(trace: &[Stage]) -> bool {
    if trace.first() != Some(&Stage::Train) || trace.last() != Some(&Stage::Encrypt) {
        return false;
    }
    let mut pos = 0;
    for s in trace {
        match PIPELINE_ORDER[pos..].iter().position(|p| p == s) {
            Some(off) => pos += off + 1,
            None => return false,
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_from_seed;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn clipping() {
        assert_eq!(clip(&pv(&[1.0, 0.0]), 5.0).unwrap(), pv(&[1.0, 0.0]));
        let c = clip(&pv(&[3.0, 4.0]), 1.0).unwrap();
        assert!((c.as_slice()[0] - 0.6).abs() < 1e-15 && (c.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(clip(&pv(&[0.0, 0.0]), 0.5).unwrap(), pv(&[0.0, 0.0]));
        assert!(clip(&pv(&[1.0]), 0.0).is_err());
        assert!(clip(&pv(&[1.0]), -1.0).is_err());
    }

    #[test]
    fn zero_sigma_is_identity() {
        let v = pv(&[1.5, -2.0]);
        assert_eq!(add_gaussian_noise(&v, 0.0, &mut rng_from_seed(1)).unwrap(), v);
        assert!(add_gaussian_noise(&v, -1.0, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn noise_is_deterministic_per_stream() {
        let v = pv(&[0.0; 8]);
        let a = add_gaussian_noise(&v, 1.0, &mut rng_from_seed(5)).unwrap();
        let b = add_gaussian_noise(&v, 1.0, &mut rng_from_seed(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pruning() {
        let v = pv(&[0.1, -2.0, 0.05]);
        assert_eq!(prune_gradients(&v, 0.0).unwrap(), v);
        assert_eq!(prune_gradients(&v, 0.2).unwrap(), pv(&[0.0, -2.0, 0.0]));
        assert_eq!(prune_gradients(&v, 3.0).unwrap(), pv(&[0.0, 0.0, 0.0]));
        assert!(prune_gradients(&v, -0.1).is_err());
    }

    #[test]
    fn privatize_clips_the_delta_not_the_weights() {
        let global = pv(&[10.0, 10.0]);
        let trained = pv(&[13.0, 14.0]);
        let cfg = DpConfig { enabled: true, clip_bound: 1.0, noise_sigma: 0.0, prune_threshold: 0.0 };
        let mut trace = vec![Stage::Train];
        let out = privatize_update(&trained, &global, &cfg, &mut rng_from_seed(0), &mut trace).unwrap();
        assert!((out.as_slice()[0] - 10.6).abs() < 1e-12);
        assert!((out.as_slice()[1] - 10.8).abs() < 1e-12);
        trace.push(Stage::Encrypt);
        assert_eq!(trace, PIPELINE_ORDER);
        assert!(is_valid_pipeline(&trace));
    }

    #[test]
    fn disabled_dp_passes_through() {
        let v = pv(&[3.0, 4.0]);
        let mut trace = vec![];
        let out = privatize_update(&v, &pv(&[0.0, 0.0]), &DpConfig::default(), &mut rng_from_seed(0), &mut trace).unwrap();
        assert_eq!(out, v);
        assert!(trace.is_empty());
    }

    #[test]
    fn pipeline_order_check() {
        use Stage::*;
        assert!(is_valid_pipeline(&[Train, Encrypt]));
        assert!(is_valid_pipeline(&[Train, Clip, Noise, Prune, Encrypt]));
        assert!(!is_valid_pipeline(&[Train, Noise, Clip, Encrypt]));
        assert!(!is_valid_pipeline(&[Clip, Train, Encrypt]));
        assert!(!is_valid_pipeline(&[Train, Clip, Noise, Prune]));
        assert!(!is_valid_pipeline(&[Train, Prune, Prune, Encrypt]));
    }

    #[test]
    fn config_validation() {
        assert!(DpConfig::default().validate().is_empty());
        let bad = DpConfig { enabled: true, clip_bound: 0.0, noise_sigma: -1.0, prune_threshold: f64::NAN };
        assert_eq!(bad.validate().len(), 3);
    }
}
