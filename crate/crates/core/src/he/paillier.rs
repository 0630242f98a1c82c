//! Paillier cryptosystem with `g = n + 1`, plus the fixed-point codec used to
//! carry floating-point updates through it.

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use num_bigint::{BigInt, BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::rngs::OsRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::primes::random_prime;
use crate::error::{Error, Result};

pub const SUPPORTED_KEY_BITS: [u64; 3] = [512, 1024, 2048];

/// Fractional bits of the fixed-point encoding.
pub const FIXED_POINT_BITS: u32 = 40;

/// Largest magnitude a party may encode for encrypted fusion (2^20 ≈ 10^6).
pub const VALUE_BOUND: f64 = (1u64 << 20) as f64;

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierPublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl fmt::Debug for PaillierPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PaillierPublicKey({} bits)", self.n.bits())
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct PaillierKeypair {
    public: PaillierPublicKey,
    p: BigUint,
    q: BigUint,
    lambda: BigUint,
    mu: BigUint,
    crt: Crt,
}

/// Precomputed values for working modulo p² and q² separately.
#[derive(Clone, PartialEq, Eq)]
struct Crt {
    p_squared: BigUint,
    q_squared: BigUint,
    /// L_p(g^{p−1} mod p²)^{-1} mod p, and likewise for q.
    h_p: BigUint,
    h_q: BigUint,
    /// q^{-1} mod p.
    q_inv_p: BigUint,
    /// (q²)^{-1} mod p².
    q2_inv_p2: BigUint,
    /// n reduced modulo φ(p²) and φ(q²).
    n_mod_phi_p2: BigUint,
    n_mod_phi_q2: BigUint,
}

impl Crt {
    fn new(p: &BigUint, q: &BigUint, n: &BigUint) -> Option<Self> {
        let p_squared = p * p;
        let q_squared = q * q;
        let g = n + 1u32;
        let h = |prime: &BigUint, sq: &BigUint| {
            let u = g.modpow(&(prime - 1u32), sq);
            ((u - 1u32) / prime).modinv(prime)
        };
        Some(Self {
            h_p: h(p, &p_squared)?,
            h_q: h(q, &q_squared)?,
            q_inv_p: q.modinv(p)?,
            q2_inv_p2: q_squared.modinv(&p_squared)?,
            n_mod_phi_p2: n % (p * (p - 1u32)),
            n_mod_phi_q2: n % (q * (q - 1u32)),
            p_squared,
            q_squared,
        })
    }

    /// x mod pq from residues mod p and q.
    fn join(&self, p: &BigUint, q: &BigUint, xp: &BigUint, xq: &BigUint) -> BigUint {
        let diff = (xp + p - (xq % p)) % p;
        xq + q * ((diff * &self.q_inv_p) % p)
    }
}

impl fmt::Debug for PaillierKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PaillierKeypair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Ciphertext(BigUint);

impl Ciphertext {
    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn from_value(v: BigUint) -> Self {
        Ciphertext(v)
    }

    /// Base64 of the big-endian magnitude.
    pub fn to_b64(&self) -> String {
        B64.encode(self.0.to_bytes_be())
    }

    pub fn from_b64(s: &str) -> Result<Self> {
        let bytes = B64
            .decode(s)
            .map_err(|e| Error::protocol(format!("bad ciphertext encoding: {e}")))?;
        Ok(Ciphertext(BigUint::from_bytes_be(&bytes)))
    }
}

pub fn keygen(bits: u64) -> Result<PaillierKeypair> {
    if !SUPPORTED_KEY_BITS.contains(&bits) {
        return Err(Error::invalid(format!(
            "unsupported Paillier modulus size {bits}; use one of {SUPPORTED_KEY_BITS:?}"
        )));
    }
    let mut rng = OsRng;
    loop {
        let p = random_prime(bits / 2, &mut rng);
        let q = random_prime(bits / 2, &mut rng);
        if p == q {
            continue;
        }
        if let Ok(kp) = PaillierKeypair::from_primes(p, q) {
            debug_assert_eq!(kp.public.n.bits(), bits);
            return Ok(kp);
        }
    }
}

impl PaillierKeypair {
    /// Builds a keypair from two distinct primes. Primality is the caller's
    /// responsibility; the coprimality condition is checked.
    pub fn from_primes(p: BigUint, q: BigUint) -> Result<Self> {
        if p == q || p <= BigUint::one() || q <= BigUint::one() {
            return Err(Error::invalid("p and q must be distinct and greater than 1"));
        }
        let n = &p * &q;
        let p1 = &p - 1u32;
        let q1 = &q - 1u32;
        if !n.gcd(&(&p1 * &q1)).is_one() {
            return Err(Error::invalid("gcd(n, (p-1)(q-1)) != 1"));
        }
        let lambda = p1.lcm(&q1);
        let mu = lambda
            .modinv(&n)
            .ok_or_else(|| Error::invalid("lambda is not invertible mod n"))?;
        let crt = Crt::new(&p, &q, &n).ok_or_else(|| Error::invalid("primes admit no CRT form"))?;
        let n_squared = &n * &n;
        Ok(Self {
            public: PaillierPublicKey { n, n_squared },
            p,
            q,
            lambda,
            mu,
            crt,
        })
    }

    pub fn public(&self) -> &PaillierPublicKey {
        &self.public
    }

    pub fn lambda(&self) -> &BigUint {
        &self.lambda
    }

    pub fn mu(&self) -> &BigUint {
        &self.mu
    }

    /// Decryption by the CRT: m_p = L_p(c^{p−1} mod p²)·h_p mod p, likewise
    /// for q, then recombined.
    pub fn decrypt(&self, c: &Ciphertext) -> Result<BigUint> {
        self.public.check_ciphertext(c)?;
        let (p, q, crt) = (&self.p, &self.q, &self.crt);
        let half = |prime: &BigUint, sq: &BigUint, h: &BigUint| {
            let u = c.0.modpow(&(prime - 1u32), sq);
            (((u - 1u32) / prime) * h) % prime
        };
        let mp = half(p, &crt.p_squared, &crt.h_p);
        let mq = half(q, &crt.q_squared, &crt.h_q);
        Ok(crt.join(p, q, &mp, &mq))
    }

    /// Textbook decryption `L(c^λ mod n²)·μ mod n`.
    pub fn decrypt_reference(&self, c: &Ciphertext) -> Result<BigUint> {
        let pk = &self.public;
        pk.check_ciphertext(c)?;
        let u = c.0.modpow(&self.lambda, &pk.n_squared);
        let l = (u - 1u32) / &pk.n;
        Ok((l * &self.mu) % &pk.n)
    }

    /// Encryption using the factorisation: r^n mod n² is computed modulo p²
    /// and q² with exponents reduced by φ. Same ciphertext as
    /// [`PaillierPublicKey::encrypt_with`].
    pub fn encrypt_with(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
        let pk = &self.public;
        if *m >= pk.n {
            return Err(Error::invalid("plaintext outside [0, n)"));
        }
        if r.is_zero() || *r >= pk.n || !r.gcd(&pk.n).is_one() {
            return Err(Error::invalid("randomness must be a unit mod n"));
        }
        let crt = &self.crt;
        let a = r.modpow(&crt.n_mod_phi_p2, &crt.p_squared);
        let b = r.modpow(&crt.n_mod_phi_q2, &crt.q_squared);
        let diff = (a + &crt.p_squared - (&b % &crt.p_squared)) % &crt.p_squared;
        let rn = b + &crt.q_squared * ((diff * &crt.q2_inv_p2) % &crt.p_squared);
        let gm = (BigUint::one() + m * &pk.n) % &pk.n_squared;
        Ok(Ciphertext((gm * rn) % &pk.n_squared))
    }

    pub fn encrypt(&self, m: &BigUint) -> Result<Ciphertext> {
        self.encrypt_with(m, &self.public.random_unit())
    }

    pub fn encrypt_vector(&self, ms: &[BigUint]) -> Result<Vec<Ciphertext>> {
        ms.par_iter().map(|m| self.encrypt(m)).collect()
    }

    pub fn decrypt_vector(&self, cs: &[Ciphertext]) -> Result<Vec<BigUint>> {
        cs.par_iter().map(|c| self.decrypt(c)).collect()
    }

    pub fn to_json(&self) -> KeypairFile {
        KeypairFile {
            bits: self.public.n.bits(),
            n: self.public.n.to_str_radix(10),
            p: self.p.to_str_radix(10),
            q: self.q.to_str_radix(10),
        }
    }

    pub fn from_json(file: &KeypairFile) -> Result<Self> {
        let parse = |s: &str| {
            BigUint::parse_bytes(s.as_bytes(), 10)
                .ok_or_else(|| Error::invalid(format!("not a decimal integer: {s:?}")))
        };
        let kp = Self::from_primes(parse(&file.p)?, parse(&file.q)?)?;
        if kp.public.n != parse(&file.n)? {
            return Err(Error::invalid("key file n does not equal p*q"));
        }
        Ok(kp)
    }
}

/// Key file layout: decimal-string big integers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypairFile {
    pub bits: u64,
    pub n: String,
    pub p: String,
    pub q: String,
}

impl PaillierPublicKey {
    pub fn from_modulus(n: BigUint) -> Result<Self> {
        if n <= BigUint::one() {
            return Err(Error::invalid("modulus must exceed 1"));
        }
        let n_squared = &n * &n;
        Ok(Self { n, n_squared })
    }

    pub fn n(&self) -> &BigUint {
        &self.n
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }

    pub fn modulus_decimal(&self) -> String {
        self.n.to_str_radix(10)
    }

    pub fn check_ciphertext(&self, c: &Ciphertext) -> Result<()> {
        if c.0.is_zero() || c.0 >= self.n_squared {
            return Err(Error::invalid("ciphertext outside (0, n^2)"));
        }
        Ok(())
    }

    fn random_unit(&self) -> BigUint {
        let mut rng = OsRng;
        loop {
            let r = rng.gen_biguint_range(&BigUint::one(), &self.n);
            if r.gcd(&self.n).is_one() {
                return r;
            }
        }
    }

    /// `c = g^m · r^n mod n²` with `g^m = 1 + m·n`.
    pub fn encrypt_with(&self, m: &BigUint, r: &BigUint) -> Result<Ciphertext> {
        if *m >= self.n {
            return Err(Error::invalid("plaintext outside [0, n)"));
        }
        if r.is_zero() || *r >= self.n || !r.gcd(&self.n).is_one() {
            return Err(Error::invalid("randomness must be a unit mod n"));
        }
        let gm = (BigUint::one() + m * &self.n) % &self.n_squared;
        let rn = r.modpow(&self.n, &self.n_squared);
        Ok(Ciphertext((gm * rn) % &self.n_squared))
    }

    pub fn encrypt(&self, m: &BigUint) -> Result<Ciphertext> {
        self.encrypt_with(m, &self.random_unit())
    }

    pub fn encrypt_vector(&self, ms: &[BigUint]) -> Result<Vec<Ciphertext>> {
        ms.par_iter().map(|m| self.encrypt(m)).collect()
    }

    /// Ciphertext of `m1 + m2 mod n`.
    pub fn add_cipher(&self, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext> {
        self.check_ciphertext(c1)?;
        self.check_ciphertext(c2)?;
        Ok(Ciphertext((&c1.0 * &c2.0) % &self.n_squared))
    }

    /// Ciphertext of `a · m mod n`.
    pub fn scalar_mul(&self, c: &Ciphertext, a: &BigUint) -> Result<Ciphertext> {
        self.check_ciphertext(c)?;
        Ok(Ciphertext(c.0.modpow(a, &self.n_squared)))
    }
}

pub fn encrypt(pk: &PaillierPublicKey, m: &BigUint) -> Result<Ciphertext> {
    pk.encrypt(m)
}

pub fn decrypt(sk: &PaillierKeypair, c: &Ciphertext) -> Result<BigUint> {
    sk.decrypt(c)
}

pub fn add_cipher(pk: &PaillierPublicKey, c1: &Ciphertext, c2: &Ciphertext) -> Result<Ciphertext> {
    pk.add_cipher(c1, c2)
}

pub fn scalar_mul(pk: &PaillierPublicKey, c: &Ciphertext, a: &BigUint) -> Result<Ciphertext> {
    pk.scalar_mul(c, a)
}

/// Fails unless `Σ weights · VALUE_BOUND · 2^s < n / 4`.
pub fn check_headroom(pk: &PaillierPublicKey, weights: &[u64]) -> Result<()> {
    let total: BigUint = weights.iter().map(|&w| BigUint::from(w)).sum();
    let bound = (total * BigUint::from(VALUE_BOUND as u64)) << FIXED_POINT_BITS;
    if bound >= &pk.n >> 2u32 {
        return Err(Error::invalid(format!(
            "weighted fixed-point sum may overflow a {}-bit modulus",
            pk.n.bits()
        )));
    }
    Ok(())
}

/// Weighted homomorphic sum: `out[j] = Π_i c_i[j]^{n_i} mod n²`, which
/// decrypts to `Σ_i n_i · m_i[j] mod n`.
pub fn fuse_encrypted(
    pk: &PaillierPublicKey,
    ciphertexts: &[Vec<Ciphertext>],
    weights: &[u64],
) -> Result<Vec<Ciphertext>> {
    let first = ciphertexts
        .first()
        .ok_or_else(|| Error::invalid("empty update set"))?;
    if weights.len() != ciphertexts.len() {
        return Err(Error::invalid("one weight per party is required"));
    }
    if ciphertexts.iter().any(|c| c.len() != first.len()) {
        return Err(Error::invalid("ciphertext vectors differ in length"));
    }
    let weights: Vec<BigUint> = weights.iter().map(|&w| BigUint::from(w)).collect();
    (0..first.len())
        .into_par_iter()
        .map(|j| {
            let mut acc = pk.scalar_mul(&ciphertexts[0][j], &weights[0])?;
            for (cs, w) in ciphertexts.iter().zip(&weights).skip(1) {
                acc = pk.add_cipher(&acc, &pk.scalar_mul(&cs[j], w)?)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Signed fixed-point encoding modulo `n`; residues above `n/2` are negative.
#[derive(Clone, Debug)]
pub struct FixedPointCodec {
    n: BigUint,
    half_n: BigUint,
}

impl FixedPointCodec {
    pub fn new(pk: &PaillierPublicKey) -> Self {
        Self {
            n: pk.n.clone(),
            half_n: &pk.n >> 1u32,
        }
    }

    pub fn scale() -> f64 {
        (1u64 << FIXED_POINT_BITS) as f64
    }

    pub fn encode(&self, x: f64) -> Result<BigUint> {
        if !x.is_finite() {
            return Err(Error::invalid("cannot encode a non-finite value"));
        }
        let scaled = (x * Self::scale()).round();
        // i128 comfortably covers every in-range value at 2^40 scale.
        if scaled.abs() >= 2f64.powi(126) {
            return Err(Error::invalid(format!("{x} is outside the fixed-point range")));
        }
        let v = BigInt::from(scaled as i128);
        if v.magnitude() << 2u32 >= self.n {
            return Err(Error::invalid(format!("{x} is outside the fixed-point range")));
        }
        Ok(if v.is_negative() {
            &self.n - v.magnitude()
        } else {
            v.magnitude().clone()
        })
    }

    /// Signed integer represented by residue `m`.
    pub fn to_signed(&self, m: &BigUint) -> BigInt {
        if *m > self.half_n {
            -BigInt::from(&self.n - m)
        } else {
            BigInt::from(m.clone())
        }
    }

    pub fn decode(&self, m: &BigUint) -> f64 {
        let v = self.to_signed(m);
        match v.to_i128() {
            Some(i) => i as f64 / Self::scale(),
            None => v.to_f64().unwrap_or(f64::NAN) / Self::scale(),
        }
    }

    pub fn encode_vector(&self, xs: &[f64]) -> Result<Vec<BigUint>> {
        xs.iter()
            .map(|&x| {
                if x.abs() > VALUE_BOUND {
                    return Err(Error::invalid(format!(
                        "{x} exceeds the encrypted-fusion value bound {VALUE_BOUND}"
                    )));
                }
                self.encode(x)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn toy() -> PaillierKeypair {
        PaillierKeypair::from_primes(5u32.into(), 7u32.into()).unwrap()
    }

    fn test_key() -> &'static PaillierKeypair {
        static KEY: OnceLock<PaillierKeypair> = OnceLock::new();
        KEY.get_or_init(|| keygen(512).unwrap())
    }

    fn big(v: u32) -> BigUint {
        BigUint::from(v)
    }

    #[test]
    fn crt_routes_agree_with_textbook_routes() {
        let kp = toy();
        let pk = kp.public();
        for m in 0..35u32 {
            for r in [1u32, 2, 3, 4, 8, 34] {
                let c = pk.encrypt_with(&big(m), &big(r)).unwrap();
                assert_eq!(kp.encrypt_with(&big(m), &big(r)).unwrap(), c);
                assert_eq!(kp.decrypt(&c).unwrap(), kp.decrypt_reference(&c).unwrap());
            }
        }
        let kp = test_key();
        let pk = kp.public();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rng.gen_biguint_below(pk.n());
            let r = rng.gen_biguint_range(&BigUint::one(), pk.n());
            let c = pk.encrypt_with(&m, &r).unwrap();
            assert_eq!(kp.encrypt_with(&m, &r).unwrap(), c);
            assert_eq!(kp.decrypt(&c).unwrap(), m);
            assert_eq!(kp.decrypt_reference(&c).unwrap(), m);
        }
    }

    #[test]
    fn toy_parameters() {
        let kp = toy();
        assert_eq!(kp.public().n(), &big(35));
        assert_eq!(kp.lambda(), &big(12));
        assert_eq!(kp.mu(), &big(3));
    }

    #[test]
    fn toy_round_trip_is_exhaustive() {
        let kp = toy();
        let pk = kp.public();
        for m in 0..35u32 {
            for r in 1..35u32 {
                if r % 5 == 0 || r % 7 == 0 {
                    continue;
                }
                let c = pk.encrypt_with(&big(m), &big(r)).unwrap();
                assert_eq!(kp.decrypt(&c).unwrap(), big(m), "m={m} r={r}");
            }
        }
    }

    #[test]
    fn toy_known_ciphertexts() {
        // Hand-computed mod 1225: 36^2 · 3^35 = 222, and so on.
        let kp = toy();
        let pk = kp.public();
        let c = pk.encrypt_with(&big(2), &big(3)).unwrap();
        assert_eq!(c.value(), &big(222));
        assert_eq!(kp.decrypt(&c).unwrap(), big(2));

        let sum = pk
            .add_cipher(
                &pk.encrypt_with(&big(1), &big(2)).unwrap(),
                &pk.encrypt_with(&big(2), &big(4)).unwrap(),
            )
            .unwrap();
        assert_eq!(sum.value(), &big(792));
        assert_eq!(kp.decrypt(&sum).unwrap(), big(3));

        let tripled = pk
            .scalar_mul(&pk.encrypt_with(&big(5), &big(2)).unwrap(), &big(3))
            .unwrap();
        assert_eq!(tripled.value(), &big(232));
        assert_eq!(kp.decrypt(&tripled).unwrap(), big(15));
    }

    #[test]
    fn range_checks() {
        let kp = toy();
        let pk = kp.public();
        assert!(pk.encrypt_with(&big(35), &big(2)).is_err());
        assert!(pk.encrypt_with(&big(1), &big(5)).is_err());
        assert!(kp.decrypt(&Ciphertext(BigUint::zero())).is_err());
        assert!(kp.decrypt(&Ciphertext(big(1225))).is_err());
        assert!(keygen(768).is_err());
    }

    #[test]
    fn keygen_512_round_trips() {
        let kp = test_key();
        let pk = kp.public();
        assert_eq!(pk.n().bits(), 512);
        assert_eq!(kp.decrypt(&pk.encrypt(&BigUint::zero()).unwrap()).unwrap(), BigUint::zero());
        let mut rng = OsRng;
        for _ in 0..100 {
            let m = rng.gen_biguint_below(pk.n());
            assert_eq!(kp.decrypt(&pk.encrypt(&m).unwrap()).unwrap(), m);
        }
    }

    #[test]
    fn encryption_is_randomised() {
        let kp = test_key();
        let pk = kp.public();
        let a = pk.encrypt(&big(7)).unwrap();
        let b = pk.encrypt(&big(7)).unwrap();
        assert_ne!(a, b);
        assert_eq!(kp.decrypt(&a).unwrap(), big(7));
        assert_eq!(kp.decrypt(&b).unwrap(), big(7));
        let one = pk.scalar_mul(&a, &big(1)).unwrap();
        assert_eq!(kp.decrypt(&one).unwrap(), big(7));
    }

    #[test]
    fn codec_round_trip_and_sign_convention() {
        let kp = test_key();
        let codec = FixedPointCodec::new(kp.public());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-1e6..1e6);
            let back = codec.decode(&codec.encode(x).unwrap());
            assert!((back - x).abs() <= 2f64.powi(-40), "{x} -> {back}");
        }
        let x = 3.25;
        let neg = kp.public().n() - codec.encode(x).unwrap();
        assert_eq!(codec.decode(&neg), -3.25);
        assert!(codec.encode(f64::NAN).is_err());
        assert!(codec.encode_vector(&[2e6]).is_err());
    }

    #[test]
    fn fuse_encrypted_two_parties() {
        let kp = test_key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk);
        let enc = |x: f64| vec![pk.encrypt(&codec.encode(x).unwrap()).unwrap()];
        let fused = fuse_encrypted(pk, &[enc(0.5), enc(0.25)], &[1, 1]).unwrap();
        let total = codec.decode(&kp.decrypt(&fused[0]).unwrap());
        assert!((total - 0.75).abs() <= 2f64.powi(-39));
    }

    #[test]
    fn fuse_encrypted_single_party_is_identity() {
        let kp = test_key();
        let pk = kp.public();
        let codec = FixedPointCodec::new(pk);
        let m = codec.encode(-1.5).unwrap();
        let fused = fuse_encrypted(pk, &[vec![pk.encrypt(&m).unwrap()]], &[1]).unwrap();
        assert_eq!(kp.decrypt(&fused[0]).unwrap(), m);
    }

    #[test]
    fn headroom_check_flags_overflow() {
        let small = PaillierKeypair::from_primes(big(1_000_003), big(1_000_033)).unwrap();
        assert!(check_headroom(small.public(), &[1, 1]).is_err());
        assert!(check_headroom(test_key().public(), &[u32::MAX as u64; 8]).is_ok());
    }

    #[test]
    fn key_file_round_trip() {
        let kp = test_key();
        let json = serde_json::to_string(&kp.to_json()).unwrap();
        let file: KeypairFile = serde_json::from_str(&json).unwrap();
        assert_eq!(&PaillierKeypair::from_json(&file).unwrap(), kp);
        let c = kp.public().encrypt(&big(9)).unwrap();
        assert_eq!(Ciphertext::from_b64(&c.to_b64()).unwrap(), c);
    }
}
