use fedtee_core::enclave::{
    attest, attest_bytes, AttestError, AttestationReport, AttestationRoot, Enclave, EnclaveError, InitToken,
    Measurement, Phase,
};
use fedtee_core::seeds::rng_from_seed;
use hmac::{Hmac, Mac};
use rand::Rng;
use sha2::{Digest, Sha256};

/// Reference lifecycle model: (phase, measured, keyed).
#[derive(Debug, Clone, Copy, PartialEq)]
struct Model {
    phase: Phase,
    measured: bool,
    keyed: bool,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Add,
    Extend,
    Init,
    KeyDerive,
    PublicKey,
    Report,
    Remove,
}

const OPS: [Op; 7] = [Op::Add, Op::Extend, Op::Init, Op::KeyDerive, Op::PublicKey, Op::Report, Op::Remove];

impl Model {
    fn step(&mut self, op: Op) -> bool {
        use Phase::*;
        match (op, self.phase) {
            (Op::Add, Created) => self.phase = Loaded,
            (Op::Extend, Loaded) => self.measured = true,
            (Op::Init, Loaded) if self.measured => self.phase = Initialized,
            (Op::KeyDerive, Initialized) => self.keyed = true,
            (Op::PublicKey | Op::Report, Initialized) if self.keyed => {}
            (Op::Remove, p) if p != Removed => {
                *self = Model { phase: Removed, measured: false, keyed: false };
            }
            _ => return false,
        }
        true
    }
}

fn apply(e: &mut Enclave, op: Op, root: &AttestationRoot) -> Result<(), EnclaveError> {
    match op {
        Op::Add => e.add(b"data".to_vec(), b"code".to_vec()),
        Op::Extend => e.extend().map(|_| ()),
        Op::Init => e.init(root).map(|_| ()),
        Op::KeyDerive => e.key_derive().map(|_| ()),
        Op::PublicKey => e.public_key().map(|_| ()),
        Op::Report => e.report(1).map(|_| ()),
        Op::Remove => e.remove(),
    }
}

#[test]
fn lifecycle_matches_reference_state_machine() {
    let root = AttestationRoot::from_bytes([3; 32]);
    let mut rng = rng_from_seed(99);
    for _ in 0..10_000 {
        let mut e = Enclave::create([1; 32]);
        let mut m = Model { phase: Phase::Created, measured: false, keyed: false };
        let len = rng.random_range(1..12);
        for _ in 0..len {
            let op = OPS[rng.random_range(0..OPS.len())];
            let expect_ok = m.step(op);
            let got = apply(&mut e, op, &root);
            assert_eq!(got.is_ok(), expect_ok, "{op:?} → {got:?} with model {m:?}");
            if let Err(err) = got {
                assert!(matches!(err, EnclaveError::Lifecycle { .. }));
            }
            assert_eq!(e.phase(), m.phase);
            assert_eq!(e.measurement().is_some(), m.measured);
        }
    }
}

#[test]
fn measurement_matches_independent_digest() {
    let mut rng = rng_from_seed(4);
    for _ in 0..200 {
        let data: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        let code: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        let mut h = Sha256::new();
        h.update((data.len() as u64).to_be_bytes());
        h.update(&data);
        h.update((code.len() as u64).to_be_bytes());
        h.update(&code);
        let oracle: [u8; 32] = h.finalize().into();
        assert_eq!(Measurement::compute(&data, &code).0, oracle);
    }
    // the length prefix keeps the data/code boundary unambiguous
    assert_ne!(Measurement::compute(b"ab", b"c"), Measurement::compute(b"a", b"bc"));
}

#[test]
fn init_token_is_hmac_of_measurement() {
    let root_bytes = [9u8; 32];
    let mut e = Enclave::create([2; 32]);
    e.add(b"d".to_vec(), b"c".to_vec()).unwrap();
    let m = e.extend().unwrap();
    let token = e.init(&AttestationRoot::from_bytes(root_bytes)).unwrap();
    let mut mac = Hmac::<Sha256>::new_from_slice(&root_bytes).unwrap();
    mac.update(&m.0);
    let oracle: [u8; 32] = mac.finalize().into_bytes().into();
    assert_eq!(token.0, oracle);
}

fn keyed(seed: u8, code: &[u8], root: &AttestationRoot) -> Enclave {
    let mut e = Enclave::create([seed; 32]);
    e.add(b"commit".to_vec(), code.to_vec()).unwrap();
    e.extend().unwrap();
    e.init(root).unwrap();
    e.key_derive().unwrap();
    e
}

#[test]
fn mutated_reports_never_attest() {
    let root = AttestationRoot::from_bytes([5; 32]);
    let e = keyed(1, b"train", &root);
    let expected = e.measurement().unwrap();
    let bytes = e.report(7).unwrap().to_bytes();
    assert!(attest_bytes(&bytes, &expected, &root).is_ok());

    let mut rng = rng_from_seed(12);
    for _ in 0..1_000 {
        let mut m = bytes.clone();
        let pos = rng.random_range(0..m.len());
        let mask: u8 = rng.random_range(1..=255);
        m[pos] ^= mask;
        assert!(attest_bytes(&m, &expected, &root).is_err(), "mutation at byte {pos}");
    }
}

#[test]
fn attestation_fixture_covers_every_outcome() {
    let root = AttestationRoot::from_bytes([5; 32]);
    let other_root = AttestationRoot::from_bytes([6; 32]);
    let honest = keyed(1, b"train", &root);
    let tampered = keyed(1, b"trainX", &root);
    let foreign = keyed(1, b"train", &other_root);
    let expected = honest.measurement().unwrap();

    let good = honest.report(3).unwrap();
    assert_eq!(attest(&good, &expected, &root), Ok(()));
    assert_eq!(attest(&tampered.report(3).unwrap(), &expected, &root), Err(AttestError::MeasurementMismatch));
    assert_eq!(attest(&foreign.report(3).unwrap(), &expected, &root), Err(AttestError::BadToken));

    let forged = AttestationReport { init_token: InitToken([0; 32]), ..good.clone() };
    assert_eq!(attest(&forged, &expected, &root), Err(AttestError::BadToken));
    let swapped_pk = AttestationReport { enclave_pk: vec![1; 32], ..good.clone() };
    assert_eq!(attest(&swapped_pk, &expected, &root), Err(AttestError::BadToken));
    let swapped_signer = AttestationReport { signer_id: 4, ..good.clone() };
    assert_eq!(attest(&swapped_signer, &expected, &root), Err(AttestError::BadToken));
    assert!(matches!(attest_bytes(&[0; 10], &expected, &root), Err(AttestError::Malformed(_))));
}

#[test]
fn keys_depend_on_instance_and_measurement() {
    let root = AttestationRoot::from_bytes([5; 32]);
    let a = keyed(1, b"train", &root).public_key().unwrap();
    assert_eq!(a, keyed(1, b"train", &root).public_key().unwrap());
    assert_ne!(a, keyed(2, b"train", &root).public_key().unwrap());
    assert_ne!(a, keyed(1, b"other", &root).public_key().unwrap());
}

#[test]
fn secrets_never_leave_the_enclave() {
    let root = AttestationRoot::from_bytes([5; 32]);
    let e = keyed(1, b"train", &root);
    let handle = e.secret_handle().unwrap();
    assert!(matches!(handle.export(), Err(EnclaveError::Forbidden(_))));
    let err = serde_json::to_string(handle).unwrap_err();
    assert!(err.to_string().contains("forbidden"));
    assert_eq!(format!("{handle:?}"), "SecretHandle(<sealed>)");
}
