//! ECDSA over P-256 behind a small sign/verify contract.

use std::fmt;

use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{Signature, SigningKey, VerifyingKey};
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SIGNATURE_SCHEME: &str = "ecdsa-p256-sha256";

pub struct SignatureKeypair {
    signing: SigningKey,
}

impl fmt::Debug for SignatureKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignatureKeypair")
            .field("verification_key", &self.verification_key())
            .finish_non_exhaustive()
    }
}

impl SignatureKeypair {
    pub fn generate() -> Self {
        Self {
            signing: SigningKey::random(&mut OsRng),
        }
    }

    /// Deterministic key for simulated hardware identities.
    pub fn from_seed(seed: &[u8], label: &str) -> Self {
        for counter in 0u32.. {
            let mut h = Sha256::new();
            h.update(seed);
            h.update(label.as_bytes());
            h.update(counter.to_be_bytes());
            if let Ok(signing) = SigningKey::from_slice(&h.finalize()) {
                return Self { signing };
            }
        }
        unreachable!("exhausted counter space")
    }

    pub fn from_secret_bytes(bytes: &[u8]) -> Result<Self> {
        let signing = SigningKey::from_slice(bytes)
            .map_err(|_| Error::Crypto("invalid signing key bytes".into()))?;
        Ok(Self { signing })
    }

    /// Raw scalar. Only ever placed inside an encrypted secret blob.
    pub fn secret_bytes(&self) -> Vec<u8> {
        self.signing.to_bytes().to_vec()
    }

    pub fn verification_key(&self) -> VerificationKey {
        VerificationKey(*self.signing.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        let sig: Signature = self.signing.sign(msg);
        sig.to_bytes().to_vec()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct VerificationKey(VerifyingKey);

impl fmt::Debug for VerificationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bytes = self.to_bytes();
        write!(f, "VerificationKey(")?;
        for b in &bytes[..6] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

impl VerificationKey {
    /// SEC1 compressed point.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_encoded_point(true).as_bytes().to_vec()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        VerifyingKey::from_sec1_bytes(bytes)
            .map(VerificationKey)
            .map_err(|_| Error::Crypto("invalid verification key".into()))
    }

    pub fn verify(&self, msg: &[u8], signature: &[u8]) -> bool {
        match Signature::from_slice(signature) {
            Ok(sig) => self.0.verify(msg, &sig).is_ok(),
            Err(_) => false,
        }
    }
}
