//! Declarative experiment description, parsed from TOML.
//!
//! Parties are numbered `0..n_parties`. Any party without an entry under
//! `[[parties]]` is an honest participant using the `[data]` defaults.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::AdversarySpec;
use crate::privacy::DpConfig;
use crate::robust_agg::AggregationMethod;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: {1}")]
    Override(String, String),
    #[error("config has {} validation error(s):\n{}", .0.len(), join_errors(.0))]
    Invalid(Vec<FieldError>),
}

fn join_errors(errs: &[FieldError]) -> String {
    errs.iter().map(|e| format!("  - {e}")).collect::<Vec<_>>().join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dim: usize,
    pub margin: f64,
    pub samples_per_party: usize,
    /// Size of the server's held-out evaluation split.
    pub eval_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { dim: 2, margin: 2.0, samples_per_party: 200, eval_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 1, lr: 0.1, batch: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsMode {
    #[default]
    DatasetSize,
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub method: AggregationMethod,
    pub krum_enabled: bool,
    /// The server's assumed number of Byzantine parties.
    pub krum_k: usize,
    pub weights: WeightsMode,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            method: AggregationMethod::WeightedMean,
            krum_enabled: false,
            krum_k: 1,
            weights: WeightsMode::DatasetSize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingRule {
    pub loss_threshold: f64,
    pub max_rounds: u32,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self { loss_threshold: 0.05, max_rounds: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartyConfig {
    pub id: u32,
    pub samples: Option<usize>,
    pub margin: Option<f64>,
    /// Local model dimension; differs from `data.dim` only to model a party
    /// that agreed to the wrong model.
    pub model_dim: Option<usize>,
    /// Loads the party enclave with training code that differs in one byte.
    pub tampered_code: bool,
    pub adversary: AdversarySpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutPoint {
    BeforeTraining,
    /// The sealed update is lost in transit.
    AfterEncrypt,
    AfterSubmission,
    /// Rejoin request made during `round`, honored at the next boundary.
    Rejoin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutEvent {
    pub round: u32,
    pub party: u32,
    pub when: DropoutPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub n_parties: u32,
    pub min_participants: usize,
    pub data: DataConfig,
    pub training: TrainingConfig,
    pub dp: DpConfig,
    pub aggregation: AggregationConfig,
    pub stopping: StoppingRule,
    pub parties: Vec<PartyConfig>,
    pub dropouts: Vec<DropoutEvent>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n_parties: 3,
            min_participants: 2,
            data: DataConfig::default(),
            training: TrainingConfig::default(),
            dp: DpConfig::default(),
            aggregation: AggregationConfig::default(),
            stopping: StoppingRule::default(),
            parties: Vec::new(),
            dropouts: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validated(self) -> Result<Self, ConfigError> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    pub fn party(&self, id: u32) -> Option<&PartyConfig> {
        self.parties.iter().find(|p| p.id == id)
    }

    pub fn adversary(&self, id: u32) -> AdversarySpec {
        self.party(id).map(|p| p.adversary.clone()).unwrap_or_default()
    }

    /// Ids of parties configured with a non-`none` adversary.
    pub fn attackers(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .parties
            .iter()
            .filter(|p| p.adversary.is_adversarial())
            .map(|p| p.id)
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Every violated invariant, each tagged with its field path.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errs = Vec::new();
        let mut err = |path: String, message: String| errs.push(FieldError { path, message });

        if self.n_parties == 0 {
            err("n_parties".into(), "must be >= 1".into());
        }
        if self.min_participants == 0 || self.min_participants > self.n_parties as usize {
            err(
                "min_participants".into(),
                format!("must lie in [1, n_parties={}], got {}", self.n_parties, self.min_participants),
            );
        }

        let d = &self.data;
        if d.dim < 2 {
            err("data.dim".into(), format!("must be >= 2, got {}", d.dim));
        }
        if !(d.margin >= 0.0 && d.margin.is_finite()) {
            err("data.margin".into(), format!("must be finite and >= 0, got {}", d.margin));
        }
        if d.samples_per_party < 2 {
            err("data.samples_per_party".into(), format!("must be >= 2, got {}", d.samples_per_party));
        }
        if d.eval_samples < 2 {
            err("data.eval_samples".into(), format!("must be >= 2, got {}", d.eval_samples));
        }

        let t = &self.training;
        if t.epochs == 0 {
            err("training.epochs".into(), "must be >= 1".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            err("training.lr".into(), format!("must be finite and > 0, got {}", t.lr));
        }
        if t.batch == 0 {
            err("training.batch".into(), "must be >= 1".into());
        }

        for (field, msg) in self.dp.validate() {
            err(format!("dp.{field}"), msg);
        }

        let a = &self.aggregation;
        if a.krum_enabled && 2 * a.krum_k + 2 >= self.n_parties as usize {
            err(
                "aggregation.krum_k".into(),
                format!(
                    "Multi-KRUM requires 2k+2 < n, got k={} with n={} (2k+2={})",
                    a.krum_k,
                    self.n_parties,
                    2 * a.krum_k + 2
                ),
            );
        }

        let s = &self.stopping;
        if s.loss_threshold.is_nan() || s.loss_threshold <= 0.0 {
            err("stopping.loss_threshold".into(), format!("must be > 0, got {}", s.loss_threshold));
        }
        if s.max_rounds == 0 {
            err("stopping.max_rounds".into(), "must be >= 1".into());
        }

        let mut seen = BTreeSet::new();
        for (i, p) in self.parties.iter().enumerate() {
            let path = format!("parties[{i}]");
            if p.id >= self.n_parties {
                err(format!("{path}.id"), format!("{} is not below n_parties={}", p.id, self.n_parties));
            }
            if !seen.insert(p.id) {
                err(format!("{path}.id"), format!("duplicate party id {}", p.id));
            }
            if let Some(n) = p.samples {
                if n < 2 {
                    err(format!("{path}.samples"), format!("must be >= 2, got {n}"));
                }
            }
            if let Some(m) = p.margin {
                if !(m >= 0.0 && m.is_finite()) {
                    err(format!("{path}.margin"), format!("must be finite and >= 0, got {m}"));
                }
            }
            if p.model_dim == Some(0) {
                err(format!("{path}.model_dim"), "must be >= 1".into());
            }
            for (field, msg) in p.adversary.validate(d.dim) {
                err(format!("{path}.adversary.{field}"), msg);
            }
        }

        for (i, ev) in self.dropouts.iter().enumerate() {
            if ev.round == 0 {
                err(format!("dropouts[{i}].round"), "rounds are numbered from 1".into());
            }
            if ev.party >= self.n_parties {
                err(format!("dropouts[{i}].party"), format!("{} is not below n_parties={}", ev.party, self.n_parties));
            }
        }
        errs
    }

    /// Applies `key=value`, where `key` is a dotted path (`training.lr`,
    /// `parties.0.adversary.boost`) and `value` is a TOML literal; bare
    /// words are taken as strings. The result is re-validated.
    pub fn with_override(&self, assignment: &str) -> Result<Self, ConfigError> {
        let bad = |msg: String| ConfigError::Override(assignment.to_string(), msg);
        let (key, raw) = assignment.split_once('=').ok_or_else(|| bad("expected key=value".into()))?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() {
            return Err(bad("empty key".into()));
        }
        let value = parse_literal(raw);
        let mut root = toml::Value::try_from(self).map_err(|e| bad(e.to_string()))?;
        set_path(&mut root, key, value).map_err(bad)?;
        let text = toml::to_string(&root).map_err(|e| bad(e.to_string()))?;
        ExperimentConfig::from_toml_str(&text)
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        cur = match cur {
            toml::Value::Table(t) => {
                if last {
                    t.insert(part.to_string(), value);
                    return Ok(());
                }
                t.entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            }
            toml::Value::Array(a) => {
                let idx: usize = part.parse().map_err(|_| format!("{part:?} is not an array index"))?;
                let slot = a.get_mut(idx).ok_or_else(|| format!("index {idx} out of range"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(format!("{part:?} is not inside a table")),
        };
    }
    unreachable!("loop returns on the last segment")
}

/// Reads and validates a config file, reporting every violation at once.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_toml_str(&text)
}
