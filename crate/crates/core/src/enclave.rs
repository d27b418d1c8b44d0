//! Software model of a trusted execution environment.
//!
//! An [`Enclave`] walks the lifecycle `Created → Loaded → Initialized →
//! Removed`. Its measurement is a SHA-256 digest over the length-prefixed
//! data and code blobs, initialization binds that measurement to an
//! attestation root key with HMAC-SHA256, and key derivation yields an
//! X25519 key pair whose secret half never leaves the enclave.

use std::fmt;

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use rand::RngCore;
use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

type HmacSha256 = Hmac<Sha256>;

pub const REPORT_MAGIC: &[u8; 4] = b"FLAT";
pub const REPORT_VERSION: u8 = 1;
/// magic + version + signer + measurement + token + pk_len
const REPORT_HEADER_LEN: usize = 4 + 1 + 4 + 32 + 32 + 2;
const KEY_INFO: &[u8] = b"fedtee/enclave-x25519/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EnclaveError {
    #[error("lifecycle violation: {op} not allowed in phase {phase:?}")]
    Lifecycle { op: &'static str, phase: Phase },
    #[error("forbidden operation: {0}")]
    Forbidden(&'static str),
}

pub type Result<T> = std::result::Result<T, EnclaveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Phase {
    Created,
    Loaded,
    Initialized,
    Removed,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    /// `SHA-256(len(data) ‖ data ‖ len(code) ‖ code)` with u64 big-endian lengths.
    pub fn compute(data: &[u8], code: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update((data.len() as u64).to_be_bytes());
        h.update(data);
        h.update((code.len() as u64).to_be_bytes());
        h.update(code);
        Measurement(h.finalize().into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement(")?;
        for b in &self.0[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

/// Vendor provisioning secret that roots every MAC in the simulation.
#[derive(Clone, PartialEq, Eq)]
pub struct AttestationRoot([u8; 32]);

impl AttestationRoot {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts any key length")
    }
}

impl fmt::Debug for AttestationRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("AttestationRoot(..)")
    }
}

/// Exportable half of an enclave key pair (X25519, 32 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EnclavePublicKey(pub [u8; 32]);

impl EnclavePublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

/// Enclave-internal secret key.
///
/// Not `Clone`, redacted in `Debug`, and every serialization attempt fails
/// with [`EnclaveError::Forbidden`].
pub struct SecretHandle {
    secret: StaticSecret,
}

impl SecretHandle {
    pub(crate) fn diffie_hellman(&self, peer: &PublicKey) -> x25519_dalek::SharedSecret {
        self.secret.diffie_hellman(peer)
    }

    pub fn public_key(&self) -> EnclavePublicKey {
        EnclavePublicKey(PublicKey::from(&self.secret).to_bytes())
    }

    /// Always refuses: secret keys never leave the enclave.
    pub fn export(&self) -> Result<Vec<u8>> {
        Err(EnclaveError::Forbidden("secret key export"))
    }
}

impl fmt::Debug for SecretHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretHandle(<sealed>)")
    }
}

impl Serialize for SecretHandle {
    fn serialize<S: Serializer>(&self, _: S) -> std::result::Result<S::Ok, S::Error> {
        Err(serde::ser::Error::custom(EnclaveError::Forbidden(
            "serializing an enclave secret key",
        )))
    }
}

/// HMAC tag produced at initialization or carried in a report.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct InitToken(pub [u8; 32]);

impl fmt::Debug for InitToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "InitToken({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

pub struct Enclave {
    data: Vec<u8>,
    code: Vec<u8>,
    phase: Phase,
    measurement: Option<Measurement>,
    init_token: Option<InitToken>,
    root: Option<AttestationRoot>,
    keys: Option<SecretHandle>,
    instance_seed: [u8; 32],
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("phase", &self.phase)
            .field("data_len", &self.data.len())
            .field("code_len", &self.code.len())
            .field("measurement", &self.measurement)
            .field("keyed", &self.keys.is_some())
            .finish()
    }
}

impl Enclave {
    /// `E(∅, ∅)`. `instance_seed` models the per-CPU fused secret that makes
    /// key material differ between enclaves running identical code.
    pub fn create(instance_seed: [u8; 32]) -> Self {
        Self {
            data: Vec::new(),
            code: Vec::new(),
            phase: Phase::Created,
            measurement: None,
            init_token: None,
            root: None,
            keys: None,
            instance_seed,
        }
    }

    fn require(&self, op: &'static str, phase: Phase) -> Result<()> {
        if self.phase != phase {
            return Err(EnclaveError::Lifecycle { op, phase: self.phase });
        }
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn code(&self) -> &[u8] {
        &self.code
    }

    pub fn measurement(&self) -> Option<Measurement> {
        self.measurement
    }

    pub fn init_token(&self) -> Option<InitToken> {
        self.init_token
    }

    pub fn add(&mut self, data: Vec<u8>, code: Vec<u8>) -> Result<()> {
        self.require("add", Phase::Created)?;
        self.data = data;
        self.code = code;
        self.phase = Phase::Loaded;
        Ok(())
    }

    pub fn extend(&mut self) -> Result<Measurement> {
        self.require("extend", Phase::Loaded)?;
        let m = Measurement::compute(&self.data, &self.code);
        self.measurement = Some(m);
        Ok(m)
    }

    /// Finalizes the measurement and returns `HMAC(root, measurement)`.
    pub fn init(&mut self, root: &AttestationRoot) -> Result<InitToken> {
        self.require("init", Phase::Loaded)?;
        let m = self.measurement.ok_or(EnclaveError::Lifecycle {
            op: "init without measurement",
            phase: self.phase,
        })?;
        let mut mac = root.mac();
        mac.update(&m.0);
        let token = InitToken(mac.finalize().into_bytes().into());
        self.init_token = Some(token);
        self.root = Some(root.clone());
        self.phase = Phase::Initialized;
        Ok(token)
    }

    /// Derives (or re-derives) the enclave key pair from the instance seed
    /// and measurement. Deterministic per instance.
    pub fn key_derive(&mut self) -> Result<(EnclavePublicKey, &SecretHandle)> {
        self.require("key_derive", Phase::Initialized)?;
        let m = self.measurement.expect("initialized enclaves are measured");
        let hk = Hkdf::<Sha256>::new(Some(&m.0), &self.instance_seed);
        let mut okm = [0u8; 32];
        hk.expand(KEY_INFO, &mut okm).expect("32 bytes is a valid HKDF length");
        let handle = SecretHandle { secret: StaticSecret::from(okm) };
        let pk = handle.public_key();
        let handle = self.keys.insert(handle);
        Ok((pk, handle))
    }

    pub fn public_key(&self) -> Result<EnclavePublicKey> {
        self.require("public_key", Phase::Initialized)?;
        self.keys
            .as_ref()
            .map(SecretHandle::public_key)
            .ok_or(EnclaveError::Lifecycle { op: "public_key before key_derive", phase: self.phase })
    }

    /// Borrow of the secret key for envelope operations run inside this enclave.
    pub fn secret_handle(&self) -> Result<&SecretHandle> {
        self.require("secret_handle", Phase::Initialized)?;
        self.keys
            .as_ref()
            .ok_or(EnclaveError::Lifecycle { op: "secret_handle before key_derive", phase: self.phase })
    }

    /// Signed report binding measurement, public key and signer identity:
    /// `token = HMAC(root, measurement ‖ pk ‖ signer_id)`.
    pub fn report(&self, signer_id: u32) -> Result<AttestationReport> {
        self.require("report", Phase::Initialized)?;
        let measurement = self.measurement.expect("initialized enclaves are measured");
        let pk = self.public_key()?;
        let root = self.root.as_ref().expect("initialized enclaves hold the root");
        Ok(AttestationReport {
            measurement,
            init_token: report_token(root, &measurement, &pk.0, signer_id),
            enclave_pk: pk.0.to_vec(),
            signer_id,
        })
    }

    /// Clears all enclave memory.
    pub fn remove(&mut self) -> Result<()> {
        if self.phase == Phase::Removed {
            return Err(EnclaveError::Lifecycle { op: "remove", phase: self.phase });
        }
        self.data.clear();
        self.code.clear();
        self.measurement = None;
        self.init_token = None;
        self.root = None;
        self.keys = None;
        self.phase = Phase::Removed;
        Ok(())
    }
}

fn report_token(
    root: &AttestationRoot,
    measurement: &Measurement,
    pk: &[u8],
    signer_id: u32,
) -> InitToken {
    let mut mac = root.mac();
    mac.update(&measurement.0);
    mac.update(pk);
    mac.update(&signer_id.to_be_bytes());
    InitToken(mac.finalize().into_bytes().into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub measurement: Measurement,
    pub init_token: InitToken,
    pub enclave_pk: Vec<u8>,
    pub signer_id: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReportParseError {
    #[error("report truncated: {0} bytes")]
    Truncated(usize),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("declared pk length {declared} but {available} bytes remain")]
    PkLength { declared: usize, available: usize },
}

impl AttestationReport {
    /// `"FLAT" ‖ 1u8 ‖ signer_id u32 BE ‖ measurement ‖ token ‖ pk_len u16 BE ‖ pk`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(REPORT_HEADER_LEN + self.enclave_pk.len());
        out.extend_from_slice(REPORT_MAGIC);
        out.push(REPORT_VERSION);
        out.extend_from_slice(&self.signer_id.to_be_bytes());
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&self.init_token.0);
        let pk_len = u16::try_from(self.enclave_pk.len()).expect("public keys fit in u16");
        out.extend_from_slice(&pk_len.to_be_bytes());
        out.extend_from_slice(&self.enclave_pk);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ReportParseError> {
        if bytes.len() < REPORT_HEADER_LEN {
            return Err(ReportParseError::Truncated(bytes.len()));
        }
        if &bytes[..4] != REPORT_MAGIC {
            return Err(ReportParseError::BadMagic);
        }
        if bytes[4] != REPORT_VERSION {
            return Err(ReportParseError::Version(bytes[4]));
        }
        let signer_id = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
        let measurement = Measurement(bytes[9..41].try_into().unwrap());
        let init_token = InitToken(bytes[41..73].try_into().unwrap());
        let pk_len = u16::from_be_bytes(bytes[73..75].try_into().unwrap()) as usize;
        let rest = &bytes[REPORT_HEADER_LEN..];
        if rest.len() != pk_len {
            return Err(ReportParseError::PkLength { declared: pk_len, available: rest.len() });
        }
        Ok(Self {
            measurement,
            init_token,
            enclave_pk: rest.to_vec(),
            signer_id,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttestError {
    #[error("malformed report: {0}")]
    Malformed(#[from] ReportParseError),
    #[error("measurement does not match the expected value")]
    MeasurementMismatch,
    #[error("report MAC does not verify")]
    BadToken,
}

/// Accepts iff the report's measurement equals `expected` and its MAC
/// verifies under `root`. The MAC comparison is constant-time.
pub fn attest(
    report: &AttestationReport,
    expected: &Measurement,
    root: &AttestationRoot,
) -> std::result::Result<(), AttestError> {
    if report.measurement != *expected {
        return Err(AttestError::MeasurementMismatch);
    }
    let mut mac = root.mac();
    mac.update(&report.measurement.0);
    mac.update(&report.enclave_pk);
    mac.update(&report.signer_id.to_be_bytes());
    mac.verify_slice(&report.init_token.0)
        .map_err(|_| AttestError::BadToken)
}

/// [`attest`] over the wire encoding.
pub fn attest_bytes(
    bytes: &[u8],
    expected: &Measurement,
    root: &AttestationRoot,
) -> std::result::Result<AttestationReport, AttestError> {
    let report = AttestationReport::from_bytes(bytes)?;
    attest(&report, expected, root)?;
    Ok(report)
}
