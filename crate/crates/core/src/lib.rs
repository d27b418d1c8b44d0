//! Desk-scale simulator for privacy-preserving federated learning across
//! software-modeled trusted execution environments.
//!
//! Parties train logistic-regression models inside measured, attested
//! enclaves, apply a differential-privacy stack to their updates, and seal
//! them to the aggregation enclave's public key. The server enclave opens
//! the updates, filters them with Multi-KRUM, and averages the survivors.
//! Concrete poisoning adversaries exercise the defenses.
//!
//! Entry point: [`protocol::run_experiment`] with an
//! [`config::ExperimentConfig`].

pub mod adversary;
pub mod config;
pub mod enclave;
pub mod envelope;
pub mod metrics;
pub mod model;
pub mod params;
pub mod privacy;
pub mod protocol;
pub mod robust_agg;
pub mod seeds;

use thiserror::Error;

pub use adversary::{AdversaryKind, AdversarySpec, Trigger};
pub use config::{ConfigError, ExperimentConfig};
pub use enclave::{AttestationReport, Enclave, Measurement};
pub use envelope::EncryptedUpdate;
pub use metrics::{MetricsLog, RoundRecord, Summary};
pub use model::{Dataset, ModelSpec};
pub use params::ParameterVector;
pub use privacy::DpConfig;
pub use protocol::{run_experiment, ExperimentOutput, ProtocolError, RoundState};
pub use robust_agg::{AggregationMethod, AggregationOutcome, KrumScore};

/// Crate-wide error; the variant names the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("params: {0}")]
    Params(#[from] params::ParamsError),
    #[error("model: {0}")]
    Model(#[from] model::ModelError),
    #[error("enclave: {0}")]
    Enclave(#[from] enclave::EnclaveError),
    #[error("envelope: {0}")]
    Envelope(#[from] envelope::EnvelopeError),
    #[error("privacy: {0}")]
    Privacy(#[from] privacy::PrivacyError),
    #[error("robust_agg: {0}")]
    Aggregation(#[from] robust_agg::AggError),
    #[error("adversary: {0}")]
    Adversary(#[from] adversary::AdversaryError),
    #[error("config: {0}")]
    Config(#[from] config::ConfigError),
    #[error("protocol: {0}")]
    Protocol(#[from] protocol::ProtocolError),
}

pub type Result<T> = std::result::Result<T, Error>;
