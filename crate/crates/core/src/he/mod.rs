//! Additively homomorphic encryption for encrypted fusion, and the signature
//! scheme used to authenticate aggregators.

mod paillier;
pub mod primes;
mod signature;

pub use paillier::{
    add_cipher, check_headroom, decrypt, encrypt, fuse_encrypted, keygen, scalar_mul, Ciphertext,
    FixedPointCodec, KeypairFile, PaillierKeypair, PaillierPublicKey, FIXED_POINT_BITS,
    SUPPORTED_KEY_BITS, VALUE_BOUND,
};
pub use signature::{SignatureKeypair, VerificationKey, SIGNATURE_SCHEME};
