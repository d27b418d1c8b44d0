//! Authenticated encryption of parameter vectors to an enclave public key.
//!
//! The envelope is a KEM/DEM hybrid with two pluggable contract points:
//! a [`KeyAgreement`] that turns the recipient public key into an
//! encapsulation plus a shared secret, and an [`AeadCipher`] that seals the
//! encoded vector. The default suite is X25519 + HKDF-SHA256 +
//! XChaCha20-Poly1305. A post-quantum KEM slots in behind `KeyAgreement`
//! without touching the wire format, since the encapsulation travels as
//! the prefix of the `ciphertext` field.
//!
//! Wire format (all integers big-endian):
//!
//! ```text
//! "FLUP" | version u8 = 1 | round u32 | party_id u32 | nonce [24]
//!        | aad_digest [32] | ct_len u32 | ciphertext [ct_len]
//! ```
//!
//! `round`, `party_id` and `aad_digest` are bound as associated data, so
//! rewriting any of them fails authentication.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{XChaCha20Poly1305, XNonce};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::enclave::{EnclavePublicKey, Measurement, SecretHandle};
use crate::params::{ParameterVector, ParamsError};

pub const UPDATE_MAGIC: &[u8; 4] = b"FLUP";
pub const UPDATE_VERSION: u8 = 1;
pub const NONCE_LEN: usize = 24;
const HEADER_LEN: usize = 4 + 1 + 4 + 4 + NONCE_LEN + 32 + 4;
const KDF_INFO: &[u8] = b"fedtee/update-envelope/v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvelopeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("key error: {0}")]
    Key(String),
    #[error("authentication failed; update was tampered with or sealed to another key")]
    Tamper,
    #[error("stale update: round {got}, expected {expected}")]
    Stale { got: u32, expected: u32 },
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, EnvelopeError>;

impl From<ParamsError> for EnvelopeError {
    fn from(e: ParamsError) -> Self {
        EnvelopeError::InvalidInput(e.to_string())
    }
}

/// `dim` as u32 LE, then each entry as binary64 LE.
pub fn encode_vector(v: &ParameterVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * v.dim());
    let dim = u32::try_from(v.dim()).expect("vector dim fits in u32");
    out.extend_from_slice(&dim.to_le_bytes());
    for x in v.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Raw-slice variant of [`encode_vector`] that validates its input.
pub fn encode_values(values: &[f64]) -> Result<Vec<u8>> {
    let v = ParameterVector::new(values.to_vec())?;
    Ok(encode_vector(&v))
}

pub fn decode_vector(bytes: &[u8]) -> Result<ParameterVector> {
    if bytes.len() < 4 {
        return Err(EnvelopeError::Malformed("vector encoding shorter than header".into()));
    }
    let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let body = &bytes[4..];
    if body.len() != dim * 8 {
        return Err(EnvelopeError::Malformed(format!(
            "vector declares dim {dim} but carries {} bytes",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParameterVector::new(values)?)
}

/// Digest of the metadata bound to an update: `round ‖ party_id ‖ measurement`.
pub fn aad_digest(round: u32, party_id: u32, sender: &Measurement) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(round.to_be_bytes());
    h.update(party_id.to_be_bytes());
    h.update(sender.as_bytes());
    h.finalize().into()
}

/// Key-agreement half of the cipher suite.
pub trait KeyAgreement {
    /// Produces `(encapsulation, shared_secret)` against `peer_pk`.
    fn encapsulate(&self, peer_pk: &[u8], rng: &mut dyn RngCore) -> Result<(Vec<u8>, [u8; 32])>;

    /// Splits `ciphertext` into its encapsulation prefix and the remainder,
    /// and recovers the shared secret with the recipient's secret.
    fn decapsulate<'c>(
        &self,
        secret: &SecretHandle,
        ciphertext: &'c [u8],
    ) -> Result<([u8; 32], &'c [u8])>;
}

/// AEAD half of the cipher suite; 24-byte nonces.
pub trait AeadCipher {
    fn seal(&self, key: &[u8; 32], nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8>;
    fn open(&self, key: &[u8; 32], nonce: &[u8; NONCE_LEN], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>>;
}

/// Ephemeral-static X25519 with HKDF-SHA256 over `(shared, epk ‖ pk)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct X25519Kem;

fn kdf(shared: &[u8; 32], epk: &[u8; 32], pk: &[u8; 32]) -> [u8; 32] {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(epk);
    salt[32..].copy_from_slice(pk);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 32];
    hk.expand(KDF_INFO, &mut key).expect("valid length");
    key
}

impl KeyAgreement for X25519Kem {
    fn encapsulate(&self, peer_pk: &[u8], rng: &mut dyn RngCore) -> Result<(Vec<u8>, [u8; 32])> {
        let pk: [u8; 32] = peer_pk
            .try_into()
            .map_err(|_| EnvelopeError::Key(format!("expected 32-byte public key, got {}", peer_pk.len())))?;
        let peer = PublicKey::from(pk);
        let mut eph_bytes = [0u8; 32];
        rng.fill_bytes(&mut eph_bytes);
        let eph = StaticSecret::from(eph_bytes);
        let epk = PublicKey::from(&eph);
        let shared = eph.diffie_hellman(&peer);
        if !shared.was_contributory() {
            return Err(EnvelopeError::Key("low-order public key".into()));
        }
        Ok((epk.as_bytes().to_vec(), kdf(shared.as_bytes(), epk.as_bytes(), &pk)))
    }

    fn decapsulate<'c>(
        &self,
        secret: &SecretHandle,
        ciphertext: &'c [u8],
    ) -> Result<([u8; 32], &'c [u8])> {
        if ciphertext.len() < 32 {
            return Err(EnvelopeError::Tamper);
        }
        let (encap, rest) = ciphertext.split_at(32);
        let epk: [u8; 32] = encap.try_into().unwrap();
        let shared = secret.diffie_hellman(&PublicKey::from(epk));
        if !shared.was_contributory() {
            return Err(EnvelopeError::Tamper);
        }
        let pk = secret.public_key();
        Ok((kdf(shared.as_bytes(), &epk, pk.as_bytes()), rest))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct XChaCha20Poly1305Aead;

impl AeadCipher for XChaCha20Poly1305Aead {
    fn seal(&self, key: &[u8; 32], nonce: &[u8; NONCE_LEN], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
        XChaCha20Poly1305::new(key.into())
            .encrypt(XNonce::from_slice(nonce), Payload { msg: plaintext, aad })
            .expect("in-memory encryption does not fail")
    }

    fn open(&self, key: &[u8; 32], nonce: &[u8; NONCE_LEN], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>> {
        XChaCha20Poly1305::new(key.into())
            .decrypt(XNonce::from_slice(nonce), Payload { msg: ciphertext, aad })
            .map_err(|_| EnvelopeError::Tamper)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedUpdate {
    pub round: u32,
    pub party_id: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub aad_digest: [u8; 32],
}

impl EncryptedUpdate {
    fn associated_data(&self) -> Vec<u8> {
        associated_data(self.round, self.party_id, &self.aad_digest)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.ciphertext.len());
        out.extend_from_slice(UPDATE_MAGIC);
        out.push(UPDATE_VERSION);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.party_id.to_be_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.aad_digest);
        let ct_len = u32::try_from(self.ciphertext.len()).expect("ciphertext fits in u32");
        out.extend_from_slice(&ct_len.to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(EnvelopeError::Malformed(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[..4] != UPDATE_MAGIC {
            return Err(EnvelopeError::Malformed("bad magic".into()));
        }
        if bytes[4] != UPDATE_VERSION {
            return Err(EnvelopeError::Malformed(format!("unsupported version {}", bytes[4])));
        }
        let round = u32::from_be_bytes(bytes[5..9].try_into().unwrap());
        let party_id = u32::from_be_bytes(bytes[9..13].try_into().unwrap());
        let nonce: [u8; NONCE_LEN] = bytes[13..37].try_into().unwrap();
        let aad_digest: [u8; 32] = bytes[37..69].try_into().unwrap();
        let ct_len = u32::from_be_bytes(bytes[69..73].try_into().unwrap()) as usize;
        let ciphertext = &bytes[HEADER_LEN..];
        if ciphertext.len() != ct_len {
            return Err(EnvelopeError::Malformed(format!(
                "ct_len {ct_len} but {} bytes follow",
                ciphertext.len()
            )));
        }
        Ok(Self {
            round,
            party_id,
            nonce,
            ciphertext: ciphertext.to_vec(),
            aad_digest,
        })
    }
}

fn associated_data(round: u32, party_id: u32, digest: &[u8; 32]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(5 + 8 + 32);
    aad.extend_from_slice(UPDATE_MAGIC);
    aad.push(UPDATE_VERSION);
    aad.extend_from_slice(&round.to_be_bytes());
    aad.extend_from_slice(&party_id.to_be_bytes());
    aad.extend_from_slice(digest);
    aad
}

/// Decrypted contents of an [`EncryptedUpdate`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpenedUpdate {
    pub vector: ParameterVector,
    pub round: u32,
    pub party_id: u32,
    pub aad_digest: [u8; 32],
}

#[allow(clippy::too_many_arguments)]
pub fn encrypt_update_with<K: KeyAgreement, A: AeadCipher, R: RngCore>(
    kem: &K,
    aead: &A,
    server_pk: &[u8],
    v: &ParameterVector,
    round: u32,
    party_id: u32,
    sender: &Measurement,
    rng: &mut R,
) -> Result<EncryptedUpdate> {
    let (encap, key) = kem.encapsulate(server_pk, rng)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let digest = aad_digest(round, party_id, sender);
    let sealed = aead.seal(&key, &nonce, &associated_data(round, party_id, &digest), &encode_vector(v));
    let mut ciphertext = encap;
    ciphertext.extend_from_slice(&sealed);
    Ok(EncryptedUpdate {
        round,
        party_id,
        nonce,
        ciphertext,
        aad_digest: digest,
    })
}

/// Authenticates and decrypts, then rejects updates for any round other
/// than `expected_round`. Authentication is checked first, so a rewritten
/// round field surfaces as [`EnvelopeError::Tamper`].
pub fn decrypt_update_with<K: KeyAgreement, A: AeadCipher>(
    kem: &K,
    aead: &A,
    secret: &SecretHandle,
    u: &EncryptedUpdate,
    expected_round: u32,
) -> Result<OpenedUpdate> {
    let (key, sealed) = kem.decapsulate(secret, &u.ciphertext)?;
    let plain = aead.open(&key, &u.nonce, &u.associated_data(), sealed)?;
    // authenticated plaintext that fails to decode was sealed by a broken sender
    let vector = decode_vector(&plain)?;
    if u.round != expected_round {
        return Err(EnvelopeError::Stale { got: u.round, expected: expected_round });
    }
    Ok(OpenedUpdate {
        vector,
        round: u.round,
        party_id: u.party_id,
        aad_digest: u.aad_digest,
    })
}

/// Seals `v` to `server_pk` with the default suite.
pub fn encrypt_update<R: RngCore>(
    server_pk: &EnclavePublicKey,
    v: &ParameterVector,
    round: u32,
    party_id: u32,
    sender: &Measurement,
    rng: &mut R,
) -> Result<EncryptedUpdate> {
    encrypt_update_with(&X25519Kem, &XChaCha20Poly1305Aead, server_pk.as_bytes(), v, round, party_id, sender, rng)
}

pub fn decrypt_update(secret: &SecretHandle, u: &EncryptedUpdate, expected_round: u32) -> Result<OpenedUpdate> {
    decrypt_update_with(&X25519Kem, &XChaCha20Poly1305Aead, secret, u, expected_round)
}
