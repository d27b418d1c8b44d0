//! Round state machine for federated learning across enclaves.
//!
//! A [`Simulation`] owns one server worker and `n` party workers. Workers
//! only talk through [`Transcript::deliver`], and every message carrying
//! model parameters is sealed to the recipient enclave's key. One run
//! proceeds as:
//!
//! 1. setup: every enclave is loaded, measured, initialized and keyed, and
//!    the server publishes the model hash, which each party checks against
//!    its local spec;
//! 2. mutual attestation between the server and each party;
//! 3. per round: the server seals the global model to each active party,
//!    parties train and poison (if adversarial), privatize, seal and
//!    submit; the server opens the updates inside its enclave, applies
//!    Multi-KRUM and the federated average, and evaluates the loss;
//! 4. once the stopping rule fires the final model is sealed to every
//!    active party, which checks it against the server's copy.
//!
//! The server walks received updates in ascending party id regardless of
//! their contents, a deterministic stand-in for an oblivious access pattern.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::Instant;

use log::{debug, info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error as ThisError;

use crate::adversary::{self, AdversaryKind, AdversarySpec};
use crate::config::{DropoutPoint, ExperimentConfig, WeightsMode};
use crate::enclave::{self, AttestError, AttestationReport, AttestationRoot, Enclave, EnclavePublicKey, Measurement};
use crate::envelope::{self, EncryptedUpdate, EnvelopeError};
use crate::metrics::{
    MetricsLog, PartyRoundStatus, PartyScore, RoundRecord, StopReason, SubmissionStatus, Summary,
};
use crate::model::{self, Dataset, ModelSpec};
use crate::params::ParameterVector;
use crate::privacy::{self, Stage};
use crate::robust_agg::{self, AggregationOutcome};
use crate::seeds::{derive_bytes, derive_rng, derive_seed};
use crate::{Error, Result};

const PARTY_CODE_TAG: &[u8] = b"fedtee/party-train/v1";
const SERVER_CODE_TAG: &[u8] = b"fedtee/server-aggregate/v1";
/// Signer id the server enclave uses in its attestation reports.
pub const SERVER_SIGNER_ID: u32 = u32::MAX;

#[derive(Debug, ThisError, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("round {round} aborted: {got} usable submissions, {need} required")]
    InsufficientQuorum { round: u32, got: usize, need: usize },
    #[error("attestation of party {party} failed ({direction:?}): {reason}")]
    Attestation {
        party: u32,
        direction: AttestDirection,
        reason: AttestError,
    },
    #[error("party {0} is not active")]
    Inactive(u32),
    #[error("unknown party {0}")]
    UnknownParty(u32),
    #[error("nonce reused by party {0}")]
    NonceReuse(u32),
    #[error("submission pipeline out of order for party {party}: {trace:?}")]
    PipelineOrder { party: u32, trace: Vec<Stage> },
    #[error("party {party} failed to open a server message: {reason}")]
    PartyReceive { party: u32, reason: String },
    #[error("final broadcast to party {0} does not match the server's model")]
    BroadcastMismatch(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AttestDirection {
    ServerVerifiesParty,
    PartyVerifiesServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Worker {
    Server,
    Party(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageKind {
    ModelHash,
    DataCommitment,
    AttestationReport,
    EncryptedGlobal,
    EncryptedUpdate,
    EncryptedFinalModel,
}

impl MessageKind {
    /// Kinds whose payload is a sealed envelope rather than public metadata.
    pub fn is_sealed(self) -> bool {
        matches!(
            self,
            MessageKind::EncryptedGlobal | MessageKind::EncryptedUpdate | MessageKind::EncryptedFinalModel
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub round: u32,
    pub sender: Worker,
    pub receiver: Worker,
    pub kind: MessageKind,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    pub round: u32,
    pub sender: Worker,
    pub receiver: Worker,
    pub kind: MessageKind,
    pub byte_len: usize,
}

/// Hook run on every message before delivery; models an active network
/// adversary or channel corruption.
pub type Interceptor = Box<dyn FnMut(&mut Message)>;

/// Ordered log of every inter-worker message.
#[derive(Default)]
pub struct Transcript {
    messages: Vec<Message>,
    interceptor: Option<Interceptor>,
}

impl std::fmt::Debug for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transcript").field("messages", &self.messages.len()).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakFinding {
    pub message_index: usize,
    pub kind: MessageKind,
    pub plaintext_index: usize,
}

impl Transcript {
    /// Records `msg` (after interception) and returns what was delivered.
    pub fn deliver(&mut self, mut msg: Message) -> &Message {
        if let Some(hook) = self.interceptor.as_mut() {
            hook(&mut msg);
        }
        self.messages.push(msg);
        self.messages.last().expect("just pushed")
    }

    pub fn set_interceptor(&mut self, hook: Interceptor) {
        self.interceptor = Some(hook);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.messages
            .iter()
            .map(|m| TranscriptEntry {
                round: m.round,
                sender: m.sender,
                receiver: m.receiver,
                kind: m.kind,
                byte_len: m.payload.len(),
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries()
            .iter()
            .map(|e| serde_json::to_string(e).expect("entries serialize") + "\n")
            .collect()
    }

    /// Messages whose payload contains the raw little-endian bytes of any
    /// of `plaintexts`.
    pub fn plaintext_leaks(&self, plaintexts: &[ParameterVector]) -> Vec<LeakFinding> {
        let needles: Vec<Vec<u8>> = plaintexts
            .iter()
            .map(|p| p.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        let mut found = Vec::new();
        for (mi, m) in self.messages.iter().enumerate() {
            for (pi, needle) in needles.iter().enumerate() {
                if m.payload.windows(needle.len()).any(|w| w == needle.as_slice()) {
                    found.push(LeakFinding { message_index: mi, kind: m.kind, plaintext_index: pi });
                }
            }
        }
        found
    }
}

/// Canonical code blob of the party training procedure for `spec`.
pub fn party_code(spec: &ModelSpec) -> Vec<u8> {
    code_blob(spec, PARTY_CODE_TAG)
}

/// Canonical code blob of the server aggregation procedure for `spec`.
pub fn server_code(spec: &ModelSpec) -> Vec<u8> {
    code_blob(spec, SERVER_CODE_TAG)
}

fn code_blob(spec: &ModelSpec, tag: &[u8]) -> Vec<u8> {
    let canon = spec.canonical_bytes();
    let mut out = Vec::with_capacity(16 + canon.len() + tag.len());
    out.extend_from_slice(&(canon.len() as u64).to_be_bytes());
    out.extend_from_slice(&canon);
    out.extend_from_slice(&(tag.len() as u64).to_be_bytes());
    out.extend_from_slice(tag);
    out
}

/// Public commitment to a private dataset; this is what a party enclave
/// measures as its data blob.
pub fn dataset_commitment(data: &Dataset) -> [u8; 32] {
    Sha256::digest(data.to_csv().as_bytes()).into()
}

/// Party `id`'s dataset before any adversarial transform.
pub fn party_clean_dataset(config: &ExperimentConfig, id: u32) -> Result<Dataset> {
    let p = config.party(id);
    let samples = p.and_then(|p| p.samples).unwrap_or(config.data.samples_per_party);
    let margin = p.and_then(|p| p.margin).unwrap_or(config.data.margin);
    Ok(model::gen_synthetic(
        derive_seed(config.master_seed, "party-data", &[u64::from(id)]),
        samples,
        config.data.dim,
        margin,
    )?)
}

/// Party `id`'s training data after its adversary (if any) poisons it.
pub fn party_training_data(config: &ExperimentConfig, id: u32) -> Result<Dataset> {
    let clean = party_clean_dataset(config, id)?;
    Ok(config
        .adversary(id)
        .poison_dataset(&clean, derive_seed(config.master_seed, "poison", &[u64::from(id)]))?)
}

/// The server's held-out evaluation split.
pub fn eval_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    Ok(model::gen_synthetic(
        derive_seed(config.master_seed, "eval-data", &[]),
        config.data.eval_samples,
        config.data.dim,
        config.data.margin,
    )?)
}

pub fn initial_global(config: &ExperimentConfig) -> Result<ParameterVector> {
    let spec = ModelSpec::logistic(config.data.dim)?;
    Ok(model::init_model(&spec, derive_seed(config.master_seed, "init-model", &[])))
}

/// Seed of party `id`'s local SGD shuffling in `round`.
pub fn training_seed(master: u64, id: u32, round: u32) -> u64 {
    derive_seed(master, "train", &[u64::from(id), u64::from(round)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartyStatus {
    Active,
    Dropped,
    Rejected,
}

#[derive(Debug)]
pub struct PartyState {
    pub id: u32,
    pub enclave: Enclave,
    /// Training data, already transformed by the party's adversary.
    pub dataset: Dataset,
    pub adversary: AdversarySpec,
    pub status: PartyStatus,
    pub verified_model_hash: bool,
    local_spec: ModelSpec,
    commitment: [u8; 32],
    /// Server key learned from a verified attestation report.
    server_pk: Option<EnclavePublicKey>,
}

impl PartyState {
    pub fn local_spec(&self) -> &ModelSpec {
        &self.local_spec
    }

    pub fn server_pk(&self) -> Option<EnclavePublicKey> {
        self.server_pk
    }
}

#[derive(Debug)]
pub struct ServerState {
    pub enclave: Enclave,
    pub spec: ModelSpec,
    pub measurement: Measurement,
    pub published_hash: [u8; 32],
    pub eval: Dataset,
    pub global: ParameterVector,
    party_measurements: BTreeMap<u32, Measurement>,
    party_pks: BTreeMap<u32, EnclavePublicKey>,
}

/// Server-side snapshot of one round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round_index: u32,
    pub round_start_global: ParameterVector,
    /// Updates that reached the server, keyed by sender.
    pub received: BTreeMap<u32, EncryptedUpdate>,
    /// Party ids behind the outcome's positional indices.
    pub contributors: Vec<u32>,
    pub outcome: Option<AggregationOutcome>,
    pub global_loss: Option<f64>,
    pub global_accuracy: Option<f64>,
    pub backdoor_success_rate: Option<f64>,
    pub statuses: Vec<PartyRoundStatus>,
    pub pipeline_traces: BTreeMap<u32, Vec<Stage>>,
}

impl RoundState {
    pub fn selected_ids(&self) -> Vec<u32> {
        self.outcome
            .as_ref()
            .map(|o| o.selected.iter().map(|&i| self.contributors[i]).collect())
            .unwrap_or_default()
    }

    pub fn discarded_ids(&self) -> Vec<u32> {
        self.outcome
            .as_ref()
            .map(|o| o.discarded.iter().map(|&i| self.contributors[i]).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub metrics: MetricsLog,
    pub transcript: Transcript,
    pub rounds: Vec<RoundState>,
    pub final_global: ParameterVector,
    pub party_status: Vec<(u32, PartyStatus)>,
    /// Every plaintext parameter vector produced during the run, for
    /// transcript audits.
    pub plaintexts: Vec<ParameterVector>,
}

pub struct Simulation {
    config: ExperimentConfig,
    root: AttestationRoot,
    server: ServerState,
    parties: Vec<PartyState>,
    transcript: Transcript,
    nonces: HashSet<[u8; envelope::NONCE_LEN]>,
    pending_rejoins: BTreeSet<u32>,
    rounds: Vec<RoundState>,
    records: Vec<RoundRecord>,
    plaintexts: Vec<ParameterVector>,
    started: Instant,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("parties", &self.parties.len())
            .field("rounds", &self.rounds.len())
            .finish()
    }
}

fn enclave_seed(master: u64, worker: Worker) -> [u8; 32] {
    let tag = match worker {
        Worker::Server => u64::MAX,
        Worker::Party(id) => u64::from(id),
    };
    derive_bytes(master, "enclave-instance", &[tag])
}

impl Simulation {
    /// Builds and keys every enclave, publishes the model hash, and runs
    /// mutual attestation. Parties failing the hash check or attestation
    /// are marked rejected.
    pub fn setup(config: ExperimentConfig) -> Result<Self> {
        let config = config.validated()?;
        let master = config.master_seed;
        let root = AttestationRoot::generate(&mut derive_rng(master, "attestation-root", &[]));
        let spec = ModelSpec::logistic(config.data.dim)?;

        let mut enc = Enclave::create(enclave_seed(master, Worker::Server));
        enc.add(Vec::new(), server_code(&spec))?;
        let measurement = enc.extend()?;
        enc.init(&root)?;
        enc.key_derive()?;
        let server = ServerState {
            enclave: enc,
            published_hash: spec.hash(),
            spec,
            measurement,
            eval: eval_dataset(&config)?,
            global: initial_global(&config)?,
            party_measurements: BTreeMap::new(),
            party_pks: BTreeMap::new(),
        };

        let mut sim = Simulation {
            root,
            server,
            parties: Vec::new(),
            transcript: Transcript::default(),
            nonces: HashSet::new(),
            pending_rejoins: BTreeSet::new(),
            rounds: Vec::new(),
            records: Vec::new(),
            plaintexts: Vec::new(),
            started: Instant::now(),
            config,
        };
        sim.plaintexts.push(sim.server.global.clone());

        for id in 0..sim.config.n_parties {
            let party = sim.build_party(id)?;
            sim.parties.push(party);
        }
        for id in 0..sim.config.n_parties {
            if sim.parties[id as usize].status == PartyStatus::Active {
                if let Err(e) = sim.attest_party(id) {
                    warn!("{e}");
                }
            }
        }
        Ok(sim)
    }

    fn build_party(&mut self, id: u32) -> Result<PartyState> {
        let cfg = self.config.party(id).cloned().unwrap_or_default();
        let local_spec = ModelSpec::logistic(cfg.model_dim.unwrap_or(self.config.data.dim))?;
        let dataset = party_training_data(&self.config, id)?;
        let commitment = dataset_commitment(&dataset);

        let mut code = party_code(&local_spec);
        if cfg.tampered_code {
            let last = code.len() - 1;
            code[last] ^= 0x01;
        }
        let mut enclave = Enclave::create(enclave_seed(self.config.master_seed, Worker::Party(id)));
        enclave.add(commitment.to_vec(), code)?;
        enclave.extend()?;
        enclave.init(&self.root)?;
        enclave.key_derive()?;

        let published = self.transcript.deliver(Message {
            round: 0,
            sender: Worker::Server,
            receiver: Worker::Party(id),
            kind: MessageKind::ModelHash,
            payload: self.server.published_hash.to_vec(),
        });
        let verified = published.payload.as_slice() == local_spec.hash().as_slice();
        if !verified {
            warn!("party {id}: local model hash differs from the published one; rejecting");
        }

        Ok(PartyState {
            id,
            enclave,
            dataset,
            adversary: cfg.adversary,
            status: if verified { PartyStatus::Active } else { PartyStatus::Rejected },
            verified_model_hash: verified,
            local_spec,
            commitment,
            server_pk: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn parties(&self) -> &[PartyState] {
        &self.parties
    }

    pub fn party(&self, id: u32) -> Result<&PartyState> {
        self.parties
            .get(id as usize)
            .ok_or(Error::Protocol(ProtocolError::UnknownParty(id)))
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    pub fn rounds(&self) -> &[RoundState] {
        &self.rounds
    }

    pub fn current_round(&self) -> u32 {
        self.rounds.len() as u32
    }

    fn reject(&mut self, id: u32, direction: AttestDirection, reason: AttestError) -> Error {
        self.parties[id as usize].status = PartyStatus::Rejected;
        self.parties[id as usize].server_pk = None;
        self.server.party_pks.remove(&id);
        Error::Protocol(ProtocolError::Attestation { party: id, direction, reason })
    }

    /// Mutual attestation. On success the party is active and each side
    /// holds the other's verified public key; on failure the party is
    /// rejected and the failing direction is reported.
    pub fn attest_party(&mut self, id: u32) -> Result<()> {
        let round = self.current_round();
        let (commitment, report) = {
            let p = self.party(id)?;
            (p.commitment, p.enclave.report(id)?)
        };

        // party → server
        let commit_msg = self.transcript.deliver(Message {
            round,
            sender: Worker::Party(id),
            receiver: Worker::Server,
            kind: MessageKind::DataCommitment,
            payload: commitment.to_vec(),
        });
        let commitment = commit_msg.payload.clone();
        let report_msg = self.transcript.deliver(Message {
            round,
            sender: Worker::Party(id),
            receiver: Worker::Server,
            kind: MessageKind::AttestationReport,
            payload: report.to_bytes(),
        });
        let expected_party = Measurement::compute(&commitment, &party_code(&self.server.spec));
        let verdict = enclave::attest_bytes(&report_msg.payload, &expected_party, &self.root);
        let party_pk = match verdict {
            Ok(r) if r.signer_id != id => {
                return Err(self.reject(id, AttestDirection::ServerVerifiesParty, AttestError::BadToken));
            }
            Ok(r) => match <[u8; 32]>::try_from(r.enclave_pk.as_slice()) {
                Ok(pk) => EnclavePublicKey(pk),
                Err(_) => return Err(self.reject(id, AttestDirection::ServerVerifiesParty, AttestError::BadToken)),
            },
            Err(reason) => return Err(self.reject(id, AttestDirection::ServerVerifiesParty, reason)),
        };

        // server → party
        let server_report: AttestationReport = self.server.enclave.report(SERVER_SIGNER_ID)?;
        let msg = self.transcript.deliver(Message {
            round,
            sender: Worker::Server,
            receiver: Worker::Party(id),
            kind: MessageKind::AttestationReport,
            payload: server_report.to_bytes(),
        });
        let expected_server = Measurement::compute(&[], &server_code(&self.parties[id as usize].local_spec));
        let server_pk = match enclave::attest_bytes(&msg.payload, &expected_server, &self.root) {
            Ok(r) if r.signer_id != SERVER_SIGNER_ID => {
                return Err(self.reject(id, AttestDirection::PartyVerifiesServer, AttestError::BadToken));
            }
            Ok(r) => match <[u8; 32]>::try_from(r.enclave_pk.as_slice()) {
                Ok(pk) => EnclavePublicKey(pk),
                Err(_) => return Err(self.reject(id, AttestDirection::PartyVerifiesServer, AttestError::BadToken)),
            },
            Err(reason) => return Err(self.reject(id, AttestDirection::PartyVerifiesServer, reason)),
        };

        self.server.party_measurements.insert(id, expected_party);
        self.server.party_pks.insert(id, party_pk);
        let p = &mut self.parties[id as usize];
        p.server_pk = Some(server_pk);
        p.status = PartyStatus::Active;
        debug!("party {id} attested");
        Ok(())
    }

    /// Marks an active party as dropped. Returns `false` (and logs a
    /// warning) when the party was not active.
    pub fn handle_dropout(&mut self, id: u32, when: DropoutPoint) -> Result<bool> {
        let p = self
            .parties
            .get_mut(id as usize)
            .ok_or(Error::Protocol(ProtocolError::UnknownParty(id)))?;
        if p.status != PartyStatus::Active {
            warn!("party {id} dropout at {when:?} ignored: status is {:?}", p.status);
            return Ok(false);
        }
        p.status = PartyStatus::Dropped;
        info!("party {id} dropped ({when:?})");
        Ok(true)
    }

    /// Queues a rejoin; it is honored at the next round boundary, after the
    /// party re-attests.
    pub fn request_rejoin(&mut self, id: u32) -> Result<()> {
        let p = self.party(id)?;
        if p.status != PartyStatus::Dropped {
            warn!("party {id} rejoin ignored: status is {:?}", p.status);
            return Ok(());
        }
        self.pending_rejoins.insert(id);
        Ok(())
    }

    pub fn pending_rejoins(&self) -> impl Iterator<Item = u32> + '_ {
        self.pending_rejoins.iter().copied()
    }

    fn round_boundary(&mut self, round: u32) -> Result<()> {
        for id in std::mem::take(&mut self.pending_rejoins) {
            if let Err(e) = self.attest_party(id) {
                warn!("rejoin of party {id} refused: {e}");
            } else {
                info!("party {id} rejoined at round {round}");
            }
        }
        let drops: Vec<u32> = self
            .config
            .dropouts
            .iter()
            .filter(|d| d.round == round && d.when == DropoutPoint::BeforeTraining)
            .map(|d| d.party)
            .collect();
        for id in drops {
            self.handle_dropout(id, DropoutPoint::BeforeTraining)?;
        }
        Ok(())
    }

    fn scheduled(&self, round: u32, id: u32, when: DropoutPoint) -> bool {
        self.config
            .dropouts
            .iter()
            .any(|d| d.round == round && d.party == id && d.when == when)
    }

    fn check_nonce(&mut self, id: u32, nonce: [u8; envelope::NONCE_LEN]) -> Result<()> {
        if !self.nonces.insert(nonce) {
            return Err(ProtocolError::NonceReuse(id).into());
        }
        Ok(())
    }

    /// Seals `v` from the server enclave to party `id` and has the party
    /// open it inside its own enclave.
    fn send_to_party(
        &mut self,
        id: u32,
        v: &ParameterVector,
        round: u32,
        kind: MessageKind,
        rng: &mut crate::seeds::SimRng,
    ) -> Result<ParameterVector> {
        let pk = *self
            .server
            .party_pks
            .get(&id)
            .ok_or(ProtocolError::Inactive(id))?;
        let sealed = envelope::encrypt_update(&pk, v, round, id, &self.server.measurement, rng)?;
        self.check_nonce(id, sealed.nonce)?;
        let msg = self.transcript.deliver(Message {
            round,
            sender: Worker::Server,
            receiver: Worker::Party(id),
            kind,
            payload: sealed.to_bytes(),
        });
        let fail = |reason: String| Error::Protocol(ProtocolError::PartyReceive { party: id, reason });
        let update = EncryptedUpdate::from_bytes(&msg.payload).map_err(|e| fail(e.to_string()))?;
        let party = &self.parties[id as usize];
        let expected_server = Measurement::compute(&[], &server_code(&party.local_spec));
        let opened = envelope::decrypt_update(party.enclave.secret_handle()?, &update, round)
            .map_err(|e| fail(e.to_string()))?;
        if opened.party_id != id || opened.aad_digest != envelope::aad_digest(round, id, &expected_server) {
            return Err(fail("metadata does not match the attested server".into()));
        }
        Ok(opened.vector)
    }

    /// Party-side work for one round: receive the global model, train,
    /// poison, privatize, seal. Returns the sealed update and its trace.
    fn party_submit(
        &mut self,
        id: u32,
        round: u32,
        start: &ParameterVector,
    ) -> Result<(EncryptedUpdate, Vec<Stage>)> {
        let master = self.config.master_seed;
        let t = self.config.training.clone();
        let dp = self.config.dp;
        let p = &self.parties[id as usize];
        let server_pk = p.server_pk.ok_or(ProtocolError::Inactive(id))?;

        let mut trace = vec![Stage::Train];
        let trained = model::local_train(start, &p.dataset, t.epochs, t.lr, t.batch, training_seed(master, id, round))?;
        let poisoned = p.adversary.transform_update(&trained, start)?;
        let mut dp_rng = derive_rng(master, "dp-noise", &[u64::from(id), u64::from(round)]);
        let submitted = privacy::privatize_update(&poisoned, start, &dp, &mut dp_rng, &mut trace)?;

        let mut rng = derive_rng(master, "party-envelope", &[u64::from(id), u64::from(round)]);
        let measurement = p.enclave.measurement().expect("initialized enclave is measured");
        let sealed = envelope::encrypt_update(&server_pk, &submitted, round, id, &measurement, &mut rng)?;
        trace.push(Stage::Encrypt);
        if !privacy::is_valid_pipeline(&trace) {
            return Err(ProtocolError::PipelineOrder { party: id, trace }.into());
        }
        self.check_nonce(id, sealed.nonce)?;
        self.plaintexts.extend([trained, submitted]);
        Ok((sealed, trace))
    }

    /// Runs the next round and records it.
    pub fn run_round(&mut self) -> Result<&RoundState> {
        let clock = Instant::now();
        let round = self.current_round() + 1;
        self.round_boundary(round)?;

        let active: Vec<u32> = self
            .parties
            .iter()
            .filter(|p| p.status == PartyStatus::Active)
            .map(|p| p.id)
            .collect();
        let mut statuses: BTreeMap<u32, SubmissionStatus> = self
            .parties
            .iter()
            .filter(|p| p.status != PartyStatus::Active)
            .map(|p| {
                let s = if p.status == PartyStatus::Rejected { SubmissionStatus::Rejected } else { SubmissionStatus::Dropped };
                (p.id, s)
            })
            .collect();

        let round_start_global = self.server.global.clone();
        let mut server_rng = derive_rng(self.config.master_seed, "server-envelope", &[u64::from(round)]);
        let mut received: BTreeMap<u32, EncryptedUpdate> = BTreeMap::new();
        let mut wire: BTreeMap<u32, Vec<u8>> = BTreeMap::new();
        let mut traces = BTreeMap::new();

        for &id in &active {
            let start = self.send_to_party(id, &round_start_global, round, MessageKind::EncryptedGlobal, &mut server_rng)?;
            let (sealed, trace) = self.party_submit(id, round, &start)?;
            traces.insert(id, trace);
            if self.scheduled(round, id, DropoutPoint::AfterEncrypt) {
                self.handle_dropout(id, DropoutPoint::AfterEncrypt)?;
                statuses.insert(id, SubmissionStatus::Lost);
                continue;
            }
            let msg = self.transcript.deliver(Message {
                round,
                sender: Worker::Party(id),
                receiver: Worker::Server,
                kind: MessageKind::EncryptedUpdate,
                payload: sealed.to_bytes(),
            });
            wire.insert(id, msg.payload.clone());
            if self.scheduled(round, id, DropoutPoint::AfterSubmission) {
                self.handle_dropout(id, DropoutPoint::AfterSubmission)?;
                statuses.insert(id, SubmissionStatus::SubmittedThenDropped);
            } else {
                statuses.insert(id, SubmissionStatus::Submitted);
            }
        }

        let need = self.config.min_participants;
        if wire.len() < need {
            return Err(ProtocolError::InsufficientQuorum { round, got: wire.len(), need }.into());
        }

        // inside the server enclave, ascending party id
        let mut contributors = Vec::new();
        let mut updates = Vec::new();
        let mut weights = Vec::new();
        let secret = self.server.enclave.secret_handle()?;
        for (&id, bytes) in &wire {
            let opened = EncryptedUpdate::from_bytes(bytes).and_then(|u| {
                let o = envelope::decrypt_update(secret, &u, round)?;
                received.insert(id, u);
                Ok(o)
            });
            let expected = self.server.party_measurements.get(&id);
            match opened {
                Ok(o)
                    if o.party_id == id
                        && expected.is_some_and(|m| o.aad_digest == envelope::aad_digest(round, id, m)) =>
                {
                    contributors.push(id);
                    weights.push(match self.config.aggregation.weights {
                        WeightsMode::Equal => 1.0,
                        WeightsMode::DatasetSize => self.parties[id as usize].dataset.size() as f64,
                    });
                    updates.push(o.vector);
                }
                Ok(_) => {
                    warn!("round {round}: update from party {id} carries foreign metadata; excluded");
                    statuses.insert(id, SubmissionStatus::Tampered);
                }
                Err(e @ (EnvelopeError::Tamper | EnvelopeError::Malformed(_) | EnvelopeError::Stale { .. })) => {
                    warn!("round {round}: update from party {id} rejected: {e}");
                    statuses.insert(id, SubmissionStatus::Tampered);
                }
                Err(e) => return Err(e.into()),
            }
        }
        if updates.len() < need {
            return Err(ProtocolError::InsufficientQuorum { round, got: updates.len(), need }.into());
        }

        let agg = &self.config.aggregation;
        let krum_k = agg.krum_enabled.then_some(agg.krum_k);
        let outcome = robust_agg::robust_aggregate(&updates, &weights, krum_k, agg.method)?;
        self.server.global = outcome.global.clone();
        self.plaintexts.push(outcome.global.clone());

        let eval = model::evaluate(&self.server.global, &self.server.eval)?;
        let backdoor = self.backdoor_rate(&self.server.global)?;

        let state = RoundState {
            round_index: round,
            round_start_global,
            received,
            contributors,
            outcome: Some(outcome),
            global_loss: Some(eval.loss),
            global_accuracy: Some(eval.accuracy),
            backdoor_success_rate: backdoor,
            statuses: statuses
                .into_iter()
                .map(|(party_id, status)| PartyRoundStatus { party_id, status })
                .collect(),
            pipeline_traces: traces,
        };

        // rejoin requests made during this round wait for the next boundary
        let rejoins: Vec<u32> = self
            .config
            .dropouts
            .iter()
            .filter(|d| d.round == round && d.when == DropoutPoint::Rejoin)
            .map(|d| d.party)
            .collect();
        for id in rejoins {
            self.request_rejoin(id)?;
        }

        let record = RoundRecord {
            round,
            global_loss: eval.loss,
            global_accuracy: eval.accuracy,
            parties: state.statuses.clone(),
            krum_scores: state
                .outcome
                .as_ref()
                .map(|o| {
                    o.scores
                        .iter()
                        .map(|s| PartyScore { party_id: state.contributors[s.party_index], score: s.score })
                        .collect()
                })
                .unwrap_or_default(),
            selected: state.selected_ids(),
            discarded: state.discarded_ids(),
            backdoor_success_rate: backdoor,
            wall_clock_ms: clock.elapsed().as_secs_f64() * 1e3,
        };
        info!(
            "round {round}: loss {:.4} acc {:.4} discarded {:?}",
            eval.loss, eval.accuracy, record.discarded
        );
        self.records.push(record);
        self.rounds.push(state);
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Backdoor success of `params` on the evaluation split, using the first
    /// backdoor attacker's trigger.
    fn backdoor_rate(&self, params: &ParameterVector) -> Result<Option<f64>> {
        let Some(attacker) = self.parties.iter().find(|p| p.adversary.kind == AdversaryKind::Backdoor) else {
            return Ok(None);
        };
        let trigger = attacker.adversary.trigger_for_dim(self.server.eval.dim());
        Ok(adversary::backdoor_success_rate(
            params,
            &self.server.eval,
            &trigger,
            attacker.adversary.target_label,
        )?)
    }

    /// Seals the final model to every active party and checks each copy.
    fn broadcast_final(&mut self) -> Result<bool> {
        let round = self.current_round();
        let global = self.server.global.clone();
        let mut rng = derive_rng(self.config.master_seed, "server-envelope", &[u64::from(round), 1]);
        let active: Vec<u32> = self
            .parties
            .iter()
            .filter(|p| p.status == PartyStatus::Active)
            .map(|p| p.id)
            .collect();
        for id in active {
            let copy = self.send_to_party(id, &global, round, MessageKind::EncryptedFinalModel, &mut rng)?;
            if copy != global {
                return Err(ProtocolError::BroadcastMismatch(id).into());
            }
        }
        Ok(true)
    }

    /// Runs rounds until the loss threshold or the round cap is reached,
    /// then broadcasts the final model.
    pub fn run(self) -> Result<ExperimentOutput> {
        self.run_with(|_| {})
    }

    /// [`Simulation::run`], calling `on_round` after each recorded round.
    pub fn run_with(mut self, mut on_round: impl FnMut(&RoundRecord)) -> Result<ExperimentOutput> {
        let stop = self.config.stopping.clone();
        let reason = loop {
            let state = self.run_round()?;
            let (loss, index) = (state.global_loss, state.round_index);
            on_round(self.records.last().expect("run_round records"));
            if loss.is_some_and(|l| l <= stop.loss_threshold) {
                break StopReason::LossThreshold;
            }
            if index >= stop.max_rounds {
                break StopReason::MaxRounds;
            }
        };
        let broadcast_verified = self.broadcast_final()?;
        let last = self.records.last().expect("at least one round ran");
        let summary = Summary {
            rounds_executed: self.current_round(),
            final_loss: last.global_loss,
            final_accuracy: last.global_accuracy,
            final_backdoor_success_rate: last.backdoor_success_rate,
            stop_reason: reason,
            krum_enabled: self.config.aggregation.krum_enabled,
            krum_k: self.config.aggregation.krum_k,
            attackers: self.config.attackers(),
            rejected: self
                .parties
                .iter()
                .filter(|p| p.status == PartyStatus::Rejected)
                .map(|p| p.id)
                .collect(),
            broadcast_verified,
            wall_clock_ms: self.started.elapsed().as_secs_f64() * 1e3,
        };
        Ok(ExperimentOutput {
            metrics: MetricsLog { rounds: self.records, summary: Some(summary) },
            transcript: self.transcript,
            rounds: self.rounds,
            final_global: self.server.global,
            party_status: self.parties.iter().map(|p| (p.id, p.status)).collect(),
            plaintexts: self.plaintexts,
        })
    }
}

/// Sets up and runs a full experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    Simulation::setup(config.clone())?.run()
}
