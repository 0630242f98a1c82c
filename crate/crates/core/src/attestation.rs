//! Two-phase trust bootstrap for aggregators.
//!
//! Phase 1: an aggregator's (simulated) security processor produces an
//! attestation report chained to a manufacturer root key. The attestation
//! server checks the chain, the launch measurement, the API version and the
//! report signature, then negotiates a key with the platform's Diffie–Hellman
//! key and ships a freshly generated signing key inside an authenticated
//! secret blob. Phase 2: each party challenges each aggregator with a fresh
//! nonce and checks the signature against the verification key published by
//! the attestation server.

use std::collections::HashMap;
use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce as GcmNonce, Tag};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use hkdf::Hkdf;
use p256::ecdh::EphemeralSecret;
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::{PublicKey, SecretKey};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::he::{SignatureKeypair, VerificationKey, SIGNATURE_SCHEME};

pub type Measurement = [u8; 32];
pub type Nonce = [u8; 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Platform certificate does not verify under the root key.
    Chain,
    Measurement,
    Version,
    /// Report signature does not verify under the certified platform key.
    Signature,
    Tamper,
    Replay,
    Unknown,
    Malformed,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::Chain => "chain",
            RejectReason::Measurement => "measurement",
            RejectReason::Version => "version",
            RejectReason::Signature => "signature",
            RejectReason::Tamper => "tamper",
            RejectReason::Replay => "replay",
            RejectReason::Unknown => "unknown",
            RejectReason::Malformed => "malformed",
        };
        f.write_str(s)
    }
}

impl From<RejectReason> for Error {
    fn from(r: RejectReason) -> Self {
        Error::Rejected(r)
    }
}

pub(crate) mod b64 {
    use super::B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map_err(serde::de::Error::custom)
    }
}

pub(crate) mod b64_32 {
    use super::B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = B64.decode(s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("expected 32 bytes"))
    }
}

/// Root-signed binding of a platform's signing key and Diffie–Hellman key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformCertificate {
    #[serde(with = "b64")]
    pub platform_key: Vec<u8>,
    #[serde(with = "b64")]
    pub dh_key: Vec<u8>,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

fn certificate_body(platform_key: &[u8], dh_key: &[u8]) -> Vec<u8> {
    let mut body = b"platform-cert-v1".to_vec();
    for field in [platform_key, dh_key] {
        body.extend_from_slice(&(field.len() as u32).to_be_bytes());
        body.extend_from_slice(field);
    }
    body
}

/// The manufacturer's root of trust. In deployment only its verification key
/// leaves the factory; here it also mints the simulated platforms.
pub struct SimulatedManufacturer {
    root: SignatureKeypair,
    seed: Vec<u8>,
}

impl SimulatedManufacturer {
    pub fn from_seed(seed: &[u8]) -> Self {
        Self {
            root: SignatureKeypair::from_seed(seed, "root"),
            seed: seed.to_vec(),
        }
    }

    pub fn root_key(&self) -> VerificationKey {
        self.root.verification_key()
    }

    pub fn issue_platform(&self, label: &str, api_version: &str, policy: u8) -> PlatformIdentity {
        let platform = SignatureKeypair::from_seed(&self.seed, &format!("platform:{label}"));
        let dh_secret = deterministic_dh_secret(&self.seed, label);
        let platform_key = platform.verification_key().to_bytes();
        let dh_key = dh_secret.public_key().to_encoded_point(true).as_bytes().to_vec();
        let signature = self.root.sign(&certificate_body(&platform_key, &dh_key));
        PlatformIdentity {
            root_key: self.root_key(),
            platform,
            dh_secret,
            certificate: PlatformCertificate {
                platform_key,
                dh_key,
                signature,
            },
            api_version: api_version.to_string(),
            policy,
        }
    }
}

fn deterministic_dh_secret(seed: &[u8], label: &str) -> SecretKey {
    for counter in 0u32.. {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(b"dh:");
        h.update(label.as_bytes());
        h.update(counter.to_be_bytes());
        if let Ok(k) = SecretKey::from_slice(&h.finalize()) {
            return k;
        }
    }
    unreachable!("exhausted counter space")
}

/// A platform's identity chain as exported by its security processor.
pub struct PlatformIdentity {
    pub root_key: VerificationKey,
    platform: SignatureKeypair,
    dh_secret: SecretKey,
    pub certificate: PlatformCertificate,
    pub api_version: String,
    pub policy: u8,
}

impl fmt::Debug for PlatformIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PlatformIdentity")
            .field("api_version", &self.api_version)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

impl PlatformIdentity {
    /// Signs a report over the given launch measurement.
    pub fn report(&self, agg_id: &str, measurement: Measurement) -> AttestationReport {
        let mut report = AttestationReport {
            agg_id: agg_id.to_string(),
            measurement,
            api_version: self.api_version.clone(),
            policy: self.policy,
            certificate: self.certificate.clone(),
            signature: Vec::new(),
        };
        report.signature = self.platform.sign(&report.signed_bytes());
        report
    }
}

/// SHA-256 over a launch configuration's canonical (sorted-key) JSON.
pub fn measure<T: Serialize>(launch_config: &T) -> Result<Measurement> {
    // serde_json::Value keeps object keys sorted, which makes the encoding
    // canonical.
    let value = serde_json::to_value(launch_config)?;
    let bytes = serde_json::to_vec(&value)?;
    Ok(Sha256::digest(bytes).into())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    pub agg_id: String,
    #[serde(with = "b64_32")]
    pub measurement: Measurement,
    pub api_version: String,
    pub policy: u8,
    pub certificate: PlatformCertificate,
    #[serde(with = "b64")]
    pub signature: Vec<u8>,
}

/// Number of mutable byte fields in a report, for fault injection.
pub const REPORT_FIELDS: usize = 8;

impl AttestationReport {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut out = b"attestation-report-v1".to_vec();
        out.extend_from_slice(&(self.agg_id.len() as u32).to_be_bytes());
        out.extend_from_slice(self.agg_id.as_bytes());
        out.extend_from_slice(&self.measurement);
        out.extend_from_slice(&(self.api_version.len() as u32).to_be_bytes());
        out.extend_from_slice(self.api_version.as_bytes());
        out.push(self.policy);
        out
    }

    /// Byte view of field `index` (0..REPORT_FIELDS).
    pub fn field_bytes(&self, index: usize) -> Vec<u8> {
        match index {
            0 => self.agg_id.as_bytes().to_vec(),
            1 => self.measurement.to_vec(),
            2 => self.api_version.as_bytes().to_vec(),
            3 => vec![self.policy],
            4 => self.certificate.platform_key.clone(),
            5 => self.certificate.dh_key.clone(),
            6 => self.certificate.signature.clone(),
            7 => self.signature.clone(),
            _ => panic!("report has {REPORT_FIELDS} fields"),
        }
    }

    /// Copy of the report with one bit flipped in field `index`. `None` when
    /// the flip makes a text field invalid UTF-8, which no decoder accepts.
    pub fn with_flipped_bit(&self, index: usize, bit: usize) -> Option<AttestationReport> {
        let mut bytes = self.field_bytes(index);
        bytes[bit / 8] ^= 1 << (bit % 8);
        let mut out = self.clone();
        match index {
            0 => out.agg_id = String::from_utf8(bytes).ok()?,
            1 => out.measurement = bytes.try_into().expect("32 bytes"),
            2 => out.api_version = String::from_utf8(bytes).ok()?,
            3 => out.policy = bytes[0],
            4 => out.certificate.platform_key = bytes,
            5 => out.certificate.dh_key = bytes,
            6 => out.certificate.signature = bytes,
            7 => out.signature = bytes,
            _ => unreachable!(),
        }
        Some(out)
    }
}

fn parse_version(v: &str) -> Option<(u32, u32)> {
    let (major, minor) = v.split_once('.')?;
    Some((major.parse().ok()?, minor.parse().ok()?))
}

/// Launch secret sealed to one platform.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecretBlob {
    pub agg_id: String,
    /// Attestation server's ephemeral Diffie–Hellman public key.
    #[serde(with = "b64")]
    pub ephemeral_key: Vec<u8>,
    #[serde(with = "b64")]
    pub nonce: Vec<u8>,
    #[serde(with = "b64")]
    pub ciphertext: Vec<u8>,
    #[serde(with = "b64")]
    pub tag: Vec<u8>,
}

fn blob_cipher(shared_secret: &[u8], agg_id: &str) -> Aes256Gcm {
    let hk = Hkdf::<Sha256>::new(None, shared_secret);
    let mut key = [0u8; 32];
    let info = [b"secret-blob-v1:".as_slice(), agg_id.as_bytes()].concat();
    hk.expand(&info, &mut key).expect("32 bytes is a valid HKDF length");
    Aes256Gcm::new(&key.into())
}

/// Aggregator-side key material after secret injection. Deliberately has no
/// serialisation: the signing key stays in memory.
pub struct AggregatorCredential {
    pub agg_id: String,
    keypair: SignatureKeypair,
}

impl fmt::Debug for AggregatorCredential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AggregatorCredential")
            .field("agg_id", &self.agg_id)
            .field("verification_key", &self.keypair.verification_key())
            .finish()
    }
}

impl AggregatorCredential {
    pub fn verification_key(&self) -> VerificationKey {
        self.keypair.verification_key()
    }

    /// Test hook for wire-capture scans.
    pub fn secret_bytes_for_audit(&self) -> Vec<u8> {
        self.keypair.secret_bytes()
    }
}

pub fn inject_secret(
    blob: &SecretBlob,
    platform: &PlatformIdentity,
) -> std::result::Result<AggregatorCredential, RejectReason> {
    let peer = PublicKey::from_sec1_bytes(&blob.ephemeral_key).map_err(|_| RejectReason::Tamper)?;
    let shared = p256::ecdh::diffie_hellman(platform.dh_secret.to_nonzero_scalar(), peer.as_affine());
    let cipher = blob_cipher(shared.raw_secret_bytes(), &blob.agg_id);
    let nonce: [u8; 12] = blob.nonce.as_slice().try_into().map_err(|_| RejectReason::Tamper)?;
    let tag: [u8; 16] = blob.tag.as_slice().try_into().map_err(|_| RejectReason::Tamper)?;
    let mut buf = blob.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            &GcmNonce::from(nonce),
            blob.agg_id.as_bytes(),
            &mut buf,
            &Tag::from(tag),
        )
        .map_err(|_| RejectReason::Tamper)?;
    let keypair = SignatureKeypair::from_secret_bytes(&buf).map_err(|_| RejectReason::Tamper)?;
    Ok(AggregatorCredential {
        agg_id: blob.agg_id.clone(),
        keypair,
    })
}

#[derive(Clone, Debug)]
pub struct AttestationPolicy {
    pub root_key: VerificationKey,
    pub expected_measurements: HashMap<String, Measurement>,
    pub min_api_version: String,
}

/// The attestation server's verification logic and aggregator registry.
#[derive(Debug)]
pub struct AttestationServer {
    policy: AttestationPolicy,
    registry: HashMap<String, VerificationKey>,
}

impl AttestationServer {
    pub fn new(policy: AttestationPolicy) -> Self {
        Self {
            policy,
            registry: HashMap::new(),
        }
    }

    /// Pure verification of a report; returns the certified platform DH key.
    pub fn verify_report(
        &self,
        report: &AttestationReport,
    ) -> std::result::Result<PublicKey, RejectReason> {
        let cert = &report.certificate;
        let body = certificate_body(&cert.platform_key, &cert.dh_key);
        if !self.policy.root_key.verify(&body, &cert.signature) {
            return Err(RejectReason::Chain);
        }
        let platform_key =
            VerificationKey::from_bytes(&cert.platform_key).map_err(|_| RejectReason::Chain)?;
        let dh_key = PublicKey::from_sec1_bytes(&cert.dh_key).map_err(|_| RejectReason::Chain)?;

        let expected = self
            .policy
            .expected_measurements
            .get(&report.agg_id)
            .ok_or(RejectReason::Unknown)?;
        if *expected != report.measurement {
            return Err(RejectReason::Measurement);
        }

        let min = parse_version(&self.policy.min_api_version).ok_or(RejectReason::Version)?;
        match parse_version(&report.api_version) {
            Some(v) if v >= min => {}
            _ => return Err(RejectReason::Version),
        }

        if !platform_key.verify(&report.signed_bytes(), &report.signature) {
            return Err(RejectReason::Signature);
        }
        Ok(dh_key)
    }

    /// Verifies the report and, on success, provisions a fresh signing key
    /// sealed to the platform, recording its verification key.
    pub fn attest_platform(
        &mut self,
        report: &AttestationReport,
    ) -> std::result::Result<SecretBlob, RejectReason> {
        let dh_key = self.verify_report(report)?;

        let aggregator_key = SignatureKeypair::generate();
        let ephemeral = EphemeralSecret::random(&mut OsRng);
        let shared = ephemeral.diffie_hellman(&dh_key);
        let cipher = blob_cipher(shared.raw_secret_bytes(), &report.agg_id);

        let mut nonce = [0u8; 12];
        OsRng.fill_bytes(&mut nonce);
        let mut buf = aggregator_key.secret_bytes();
        let tag = cipher
            .encrypt_in_place_detached(&GcmNonce::from(nonce), report.agg_id.as_bytes(), &mut buf)
            .map_err(|_| RejectReason::Tamper)?;

        self.registry
            .insert(report.agg_id.clone(), aggregator_key.verification_key());
        Ok(SecretBlob {
            agg_id: report.agg_id.clone(),
            ephemeral_key: ephemeral.public_key().to_encoded_point(true).as_bytes().to_vec(),
            nonce: nonce.to_vec(),
            ciphertext: buf,
            tag: tag.to_vec(),
        })
    }

    pub fn lookup(&self, agg_id: &str) -> Option<VerificationKey> {
        self.registry.get(agg_id).copied()
    }

    pub fn registry_len(&self) -> usize {
        self.registry.len()
    }

    pub fn scheme(&self) -> &'static str {
        SIGNATURE_SCHEME
    }
}

pub fn issue_challenge() -> Nonce {
    let mut nonce = [0u8; 32];
    OsRng.fill_bytes(&mut nonce);
    nonce
}

pub fn respond(credential: &AggregatorCredential, nonce: &Nonce) -> Vec<u8> {
    credential.keypair.sign(nonce)
}

/// A party's outstanding and spent challenge nonces, per aggregator.
#[derive(Debug, Default)]
pub struct ChallengeBook {
    outstanding: HashMap<String, Nonce>,
    retired: HashMap<String, Vec<Nonce>>,
}

impl ChallengeBook {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&mut self, agg_id: &str) -> Nonce {
        let nonce = issue_challenge();
        self.outstanding.insert(agg_id.to_string(), nonce);
        nonce
    }

    /// Accepts iff `signature` verifies over exactly the outstanding nonce.
    /// The nonce is retired whatever the outcome.
    pub fn verify_response(
        &mut self,
        agg_id: &str,
        echoed_nonce: &Nonce,
        signature: &[u8],
        published_key: Option<&VerificationKey>,
    ) -> std::result::Result<(), RejectReason> {
        let key = published_key.ok_or(RejectReason::Unknown)?;
        let issued = self.outstanding.remove(agg_id).ok_or(RejectReason::Replay)?;
        let retired = self.retired.entry(agg_id.to_string()).or_default();
        let result = if *echoed_nonce != issued {
            Err(RejectReason::Replay)
        } else if key.verify(&issued, signature) {
            Ok(())
        } else if retired.iter().any(|old| key.verify(old, signature)) {
            Err(RejectReason::Replay)
        } else {
            Err(RejectReason::Signature)
        };
        retired.push(issued);
        result
    }
}

/// Encodes key bytes the way the registry endpoint publishes them.
pub fn key_to_b64(key: &VerificationKey) -> String {
    B64.encode(key.to_bytes())
}

pub fn key_from_b64(s: &str) -> Result<VerificationKey> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::protocol(format!("bad key encoding: {e}")))?;
    VerificationKey::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const MEASUREMENT: Measurement = [0xAB; 32];

    fn setup() -> (SimulatedManufacturer, PlatformIdentity, AttestationServer) {
        let maker = SimulatedManufacturer::from_seed(b"factory");
        let platform = maker.issue_platform("agg-0", "0.22", 0x01);
        let server = AttestationServer::new(AttestationPolicy {
            root_key: maker.root_key(),
            expected_measurements: HashMap::from([("agg-0".to_string(), MEASUREMENT)]),
            min_api_version: "0.17".into(),
        });
        (maker, platform, server)
    }

    #[test]
    fn happy_path_registers_and_injects() {
        let (_, platform, mut server) = setup();
        let blob = server
            .attest_platform(&platform.report("agg-0", MEASUREMENT))
            .unwrap();
        assert_eq!(server.registry_len(), 1);
        let cred = inject_secret(&blob, &platform).unwrap();
        assert_eq!(Some(cred.verification_key()), server.lookup("agg-0"));
    }

    #[test]
    fn measurement_bit_flip_is_rejected() {
        let (_, platform, mut server) = setup();
        let mut m = MEASUREMENT;
        m[5] ^= 0x10;
        let report = platform.report("agg-0", m);
        assert_eq!(server.attest_platform(&report), Err(RejectReason::Measurement));
        assert_eq!(server.registry_len(), 0);
    }

    #[test]
    fn rogue_root_is_rejected() {
        let (_, _, mut server) = setup();
        let rogue = SimulatedManufacturer::from_seed(b"rogue factory");
        let platform = rogue.issue_platform("agg-0", "0.22", 0x01);
        let report = platform.report("agg-0", MEASUREMENT);
        assert_eq!(server.attest_platform(&report), Err(RejectReason::Chain));
    }

    #[test]
    fn stale_version_is_rejected() {
        let (maker, _, mut server) = setup();
        let old = maker.issue_platform("agg-0", "0.16", 0x01);
        assert_eq!(
            server.attest_platform(&old.report("agg-0", MEASUREMENT)),
            Err(RejectReason::Version)
        );
        let newer = maker.issue_platform("agg-0", "1.0", 0x01);
        assert!(server.attest_platform(&newer.report("agg-0", MEASUREMENT)).is_ok());
    }

    #[test]
    fn every_single_bit_mutation_is_rejected() {
        let (_, platform, server) = setup();
        let report = platform.report("agg-0", MEASUREMENT);
        assert!(server.verify_report(&report).is_ok());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..256 {
            let field = rng.gen_range(0..REPORT_FIELDS);
            let bits = report.field_bytes(field).len() * 8;
            let bit = rng.gen_range(0..bits);
            if let Some(mutated) = report.with_flipped_bit(field, bit) {
                assert!(
                    server.verify_report(&mutated).is_err(),
                    "field {field} bit {bit} accepted"
                );
            }
        }
    }

    #[test]
    fn modified_blob_is_tamper() {
        let (_, platform, mut server) = setup();
        let blob = server
            .attest_platform(&platform.report("agg-0", MEASUREMENT))
            .unwrap();
        let mut bad = blob.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(inject_secret(&bad, &platform).unwrap_err(), RejectReason::Tamper);
        let mut bad = blob.clone();
        bad.agg_id = "agg-1".into();
        assert_eq!(inject_secret(&bad, &platform).unwrap_err(), RejectReason::Tamper);
    }

    #[test]
    fn blob_for_another_platform_is_tamper() {
        let (maker, platform, mut server) = setup();
        let blob = server
            .attest_platform(&platform.report("agg-0", MEASUREMENT))
            .unwrap();
        let other = maker.issue_platform("agg-9", "0.22", 0x01);
        assert_eq!(inject_secret(&blob, &other).unwrap_err(), RejectReason::Tamper);
    }

    fn credential() -> (AttestationServer, AggregatorCredential) {
        let (_, platform, mut server) = setup();
        let blob = server
            .attest_platform(&platform.report("agg-0", MEASUREMENT))
            .unwrap();
        let cred = inject_secret(&blob, &platform).unwrap();
        (server, cred)
    }

    #[test]
    fn challenge_response_accepts_honest_aggregator() {
        let (server, cred) = credential();
        let mut book = ChallengeBook::new();
        let nonce = book.issue("agg-0");
        let sig = respond(&cred, &nonce);
        assert_eq!(
            book.verify_response("agg-0", &nonce, &sig, server.lookup("agg-0").as_ref()),
            Ok(())
        );
    }

    #[test]
    fn unregistered_key_is_rejected() {
        let (server, _) = credential();
        let impostor = SignatureKeypair::generate();
        let mut book = ChallengeBook::new();
        let nonce = book.issue("agg-0");
        let sig = impostor.sign(&nonce);
        assert_eq!(
            book.verify_response("agg-0", &nonce, &sig, server.lookup("agg-0").as_ref()),
            Err(RejectReason::Signature)
        );
        let nonce = book.issue("agg-7");
        assert_eq!(
            book.verify_response("agg-7", &nonce, &sig, server.lookup("agg-7").as_ref()),
            Err(RejectReason::Unknown)
        );
    }

    #[test]
    fn replayed_responses_are_rejected() {
        let (server, cred) = credential();
        let key = server.lookup("agg-0");
        let mut book = ChallengeBook::new();
        let first = book.issue("agg-0");
        let first_sig = respond(&cred, &first);
        book.verify_response("agg-0", &first, &first_sig, key.as_ref())
            .unwrap();

        // Same pair again: the nonce is spent.
        assert_eq!(
            book.verify_response("agg-0", &first, &first_sig, key.as_ref()),
            Err(RejectReason::Replay)
        );
        // Old pair against a fresh challenge.
        let _fresh = book.issue("agg-0");
        assert_eq!(
            book.verify_response("agg-0", &first, &first_sig, key.as_ref()),
            Err(RejectReason::Replay)
        );
        // Old signature presented with the fresh nonce echoed.
        let fresh = book.issue("agg-0");
        assert_eq!(
            book.verify_response("agg-0", &fresh, &first_sig, key.as_ref()),
            Err(RejectReason::Replay)
        );
    }

    #[test]
    fn measurement_is_canonical() {
        #[derive(Serialize)]
        struct A {
            b: u32,
            a: u32,
        }
        #[derive(Serialize)]
        struct B {
            a: u32,
            b: u32,
        }
        assert_eq!(measure(&A { a: 1, b: 2 }).unwrap(), measure(&B { a: 1, b: 2 }).unwrap());
        assert_ne!(measure(&A { a: 1, b: 2 }).unwrap(), measure(&B { a: 2, b: 1 }).unwrap());
    }

    #[test]
    fn report_json_round_trip() {
        let (_, platform, _) = setup();
        let report = platform.report("agg-0", MEASUREMENT);
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<AttestationReport>(&json).unwrap(), report);
    }
}
