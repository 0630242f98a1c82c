//! Flattened parameter vectors, the shared model-mapper and per-round
//! permutations.
//!
//! Every party must derive the same mapper and the same permutations from the
//! same secrets, so all randomness here comes from one keyed stream:
//! `SHA-256(key ‖ round_id (u64 BE) ‖ partition_index (u32 BE))` seeds a
//! ChaCha20 keystream (zero nonce, counter 0) whose little-endian 64-bit words
//! drive a Fisher–Yates pass with rejection sampling.

use std::fmt;
use std::ops::Deref;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 32-byte secret or seed shared between parties.
pub type Seed = [u8; 32];

/// Partition index reserved for the mapper shuffle.
pub const MAPPER_PARTITION_SENTINEL: u32 = 0xFFFF_FFFF;

/// A flattened model update: parameters or gradients, all finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        ensure_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ParameterVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParameterVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ParameterVector> for Vec<f64> {
    fn from(v: ParameterVector) -> Self {
        v.0
    }
}

pub fn ensure_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::invalid(format!("non-finite value at index {i}"))),
        None => Ok(()),
    }
}

/// Derives the 32-byte stream seed for one (key, round, partition) triple.
pub fn stream_seed(key: &Seed, round_id: u64, partition_index: u32) -> Seed {
    let mut h = Sha256::new();
    h.update(key);
    h.update(round_id.to_be_bytes());
    h.update(partition_index.to_be_bytes());
    h.finalize().into()
}

/// Uniform draw from `[0, bound)` by rejection on 64-bit keystream words.
fn uniform_below(rng: &mut ChaCha20Rng, bound: u64) -> u64 {
    debug_assert!(bound > 0);
    // 2^64 mod bound, computed without 128-bit arithmetic.
    let excess = (u64::MAX % bound + 1) % bound;
    loop {
        let w = rng.next_u64();
        // Accept w < 2^64 - excess.
        if excess == 0 || w < excess.wrapping_neg() {
            return w % bound;
        }
    }
}

/// Fisher–Yates shuffle in place, i from len-1 down to 1, j uniform in [0, i].
pub fn seeded_shuffle<T>(items: &mut [T], seed: Seed) {
    let mut rng = ChaCha20Rng::from_seed(seed);
    for i in (1..items.len()).rev() {
        let j = uniform_below(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Deterministic assignment of every parameter index to one aggregator.
#[derive(Clone, PartialEq)]
pub struct ModelMapper {
    model_size: usize,
    proportions: Vec<f64>,
    seed: Seed,
    assignment: Vec<u32>,
    /// Ascending original indices held by each aggregator.
    positions: Vec<Vec<usize>>,
}

impl fmt::Debug for ModelMapper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelMapper")
            .field("model_size", &self.model_size)
            .field("proportions", &self.proportions)
            .field("counts", &self.counts())
            .finish_non_exhaustive()
    }
}

/// Per-aggregator sizes: floor(k·p) each, remainder to the largest
/// fractional parts with ties going to the lower index.
pub fn exact_counts(model_size: usize, proportions: &[f64]) -> Vec<usize> {
    let total: f64 = proportions.iter().sum();
    let scaled: Vec<f64> = proportions
        .iter()
        .map(|p| model_size as f64 * (p / total))
        .collect();
    let mut counts: Vec<usize> = scaled.iter().map(|s| s.floor() as usize).collect();
    let frac: Vec<f64> = scaled
        .iter()
        .zip(&counts)
        .map(|(s, &c)| s - c as f64)
        .collect();

    let mut order: Vec<usize> = (0..proportions.len()).collect();
    order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));

    let assigned: usize = counts.iter().sum();
    if assigned <= model_size {
        for &a in order.iter().cycle().take(model_size - assigned) {
            counts[a] += 1;
        }
    } else {
        // Only reachable through rounding in k·p; take back from the
        // smallest fractional parts.
        let mut excess = assigned - model_size;
        for &a in order.iter().rev() {
            if excess == 0 {
                break;
            }
            if counts[a] > 0 {
                counts[a] -= 1;
                excess -= 1;
            }
        }
    }
    counts
}

pub fn build_mapper(model_size: usize, proportions: &[f64], seed: Seed) -> Result<ModelMapper> {
    if model_size == 0 {
        return Err(Error::invalid("model_size must be at least 1"));
    }
    if proportions.is_empty() {
        return Err(Error::invalid("at least one aggregator is required"));
    }
    if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid("proportions must be finite and non-negative"));
    }
    let total: f64 = proportions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("proportions sum to {total}, expected 1")));
    }
    if proportions.len() > u32::MAX as usize {
        return Err(Error::invalid("too many aggregators"));
    }

    let counts = exact_counts(model_size, proportions);
    let mut assignment: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(a, &c)| std::iter::repeat_n(a as u32, c))
        .collect();
    seeded_shuffle(&mut assignment, stream_seed(&seed, 0, MAPPER_PARTITION_SENTINEL));

    let mut positions = vec![Vec::new(); proportions.len()];
    for (i, &a) in assignment.iter().enumerate() {
        positions[a as usize].push(i);
    }
    Ok(ModelMapper {
        model_size,
        proportions: proportions.to_vec(),
        seed,
        assignment,
        positions,
    })
}

impl ModelMapper {
    pub fn model_size(&self) -> usize {
        self.model_size
    }

    pub fn num_aggregators(&self) -> usize {
        self.positions.len()
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn seed(&self) -> &Seed {
        &self.seed
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    /// Original indices owned by `aggregator`, ascending.
    pub fn positions(&self, aggregator: usize) -> &[usize] {
        &self.positions[aggregator]
    }

    pub fn count(&self, aggregator: usize) -> usize {
        self.positions[aggregator].len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.positions.iter().map(Vec::len).collect()
    }
}

/// One update split into per-aggregator sub-vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedUpdate {
    pub parts: Vec<Vec<f64>>,
    pub round_id: u64,
}

impl PartitionedUpdate {
    pub fn new(parts: Vec<Vec<f64>>) -> Self {
        Self { parts, round_id: 0 }
    }

    pub fn at_round(mut self, round_id: u64) -> Self {
        self.round_id = round_id;
        self
    }
}

pub fn partition(v: &[f64], mapper: &ModelMapper) -> Result<PartitionedUpdate> {
    if v.len() != mapper.model_size {
        return Err(Error::invalid(format!(
            "vector length {} does not match model size {}",
            v.len(),
            mapper.model_size
        )));
    }
    let parts = mapper
        .positions
        .iter()
        .map(|idx| idx.iter().map(|&i| v[i]).collect())
        .collect();
    Ok(PartitionedUpdate::new(parts))
}

pub fn merge(parts: &PartitionedUpdate, mapper: &ModelMapper) -> Result<Vec<f64>> {
    if parts.parts.len() != mapper.num_aggregators() {
        return Err(Error::invalid(format!(
            "expected {} parts, got {}",
            mapper.num_aggregators(),
            parts.parts.len()
        )));
    }
    let mut out = vec![0.0; mapper.model_size];
    for (a, (part, idx)) in parts.parts.iter().zip(&mapper.positions).enumerate() {
        if part.len() != idx.len() {
            return Err(Error::invalid(format!(
                "part {a} has length {}, mapper expects {}",
                part.len(),
                idx.len()
            )));
        }
        for (&i, &x) in idx.iter().zip(part) {
            out[i] = x;
        }
    }
    Ok(out)
}

/// A per-round, per-partition bijection on `[0, m)`.
#[derive(Clone, PartialEq)]
pub struct PermutationSpec {
    permutation_key: Seed,
    pub round_id: u64,
    pub partition_index: u32,
    permutation: Vec<usize>,
}

impl fmt::Debug for PermutationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PermutationSpec")
            .field("round_id", &self.round_id)
            .field("partition_index", &self.partition_index)
            .field("m", &self.permutation.len())
            .finish_non_exhaustive()
    }
}

pub fn derive_permutation(
    permutation_key: &Seed,
    round_id: u64,
    partition_index: u32,
    m: usize,
) -> PermutationSpec {
    let mut permutation: Vec<usize> = (0..m).collect();
    seeded_shuffle(
        &mut permutation,
        stream_seed(permutation_key, round_id, partition_index),
    );
    PermutationSpec {
        permutation_key: *permutation_key,
        round_id,
        partition_index,
        permutation,
    }
}

impl PermutationSpec {
    pub fn identity(m: usize) -> Self {
        Self {
            permutation_key: [0; 32],
            round_id: 0,
            partition_index: 0,
            permutation: (0..m).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.permutation
    }

    pub fn key(&self) -> &Seed {
        &self.permutation_key
    }

    pub fn is_identity(&self) -> bool {
        self.permutation.iter().enumerate().all(|(i, &p)| i == p)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.permutation.len() {
            return Err(Error::invalid(format!(
                "part length {len} does not match permutation size {}",
                self.permutation.len()
            )));
        }
        Ok(())
    }

    /// Moves input element `i` to position `permutation[i]`.
    pub fn permute<T: Copy + Default>(&self, part: &[T]) -> Result<Vec<T>> {
        self.check_len(part.len())?;
        let mut out = vec![T::default(); part.len()];
        for (&dst, &x) in self.permutation.iter().zip(part) {
            out[dst] = x;
        }
        Ok(out)
    }

    pub fn unpermute<T: Copy>(&self, part: &[T]) -> Result<Vec<T>> {
        self.check_len(part.len())?;
        Ok(self.permutation.iter().map(|&src| part[src]).collect())
    }
}

pub fn permute(part: &[f64], spec: &PermutationSpec) -> Result<Vec<f64>> {
    spec.permute(part)
}

pub fn unpermute(part: &[f64], spec: &PermutationSpec) -> Result<Vec<f64>> {
    spec.unpermute(part)
}

/// Base64 of the little-endian IEEE-754 bytes.
pub fn encode_f64_payload(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_f64_payload(payload: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(payload)
        .map_err(|e| Error::protocol(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::protocol(format!(
            "payload of {} bytes is not a whole number of f64 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn parse_seed_hex(s: &str) -> Result<Seed> {
    if s.len() != 64 {
        return Err(Error::invalid(format!("expected 64 hex chars, got {}", s.len())));
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks(2).enumerate() {
        let hex = std::str::from_utf8(chunk).map_err(|_| Error::invalid("non-ascii hex"))?;
        out[i] = u8::from_str_radix(hex, 16)
            .map_err(|_| Error::invalid(format!("invalid hex digit pair {hex:?}")))?;
    }
    Ok(out)
}

pub fn seed_hex(seed: &Seed) -> String {
    seed.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const ORACLE_SEED: Seed = {
        let mut s = [0u8; 32];
        let mut i = 0;
        while i < 32 {
            s[i] = i as u8;
            i += 1;
        }
        s
    };

    #[test]
    fn single_aggregator_gets_everything() {
        let m = build_mapper(10, &[1.0], [7; 32]).unwrap();
        assert!(m.assignment().iter().all(|&a| a == 0));
        assert_eq!(m.counts(), vec![10]);
    }

    #[test]
    fn even_split_is_exact_for_any_seed() {
        for s in 0..20u8 {
            let m = build_mapper(10, &[0.5, 0.5], [s; 32]).unwrap();
            assert_eq!(m.counts(), vec![5, 5]);
        }
    }

    #[test]
    fn remainder_goes_to_largest_fraction_then_lowest_index() {
        assert_eq!(exact_counts(7, &[0.6, 0.2, 0.2]), vec![4, 2, 1]);
        assert_eq!(exact_counts(10, &[1.0 / 3.0; 3]), vec![4, 3, 3]);
        assert_eq!(exact_counts(3, &[0.0, 1.0]), vec![0, 3]);
    }

    #[test]
    fn mapper_matches_reference_shuffle() {
        // tests/oracles/shuffle_oracle.py
        let m = build_mapper(6, &[1.0 / 3.0; 3], ORACLE_SEED).unwrap();
        assert_eq!(m.assignment(), &[0, 0, 2, 2, 1, 1]);
        let m = build_mapper(10, &[0.5, 0.5], ORACLE_SEED).unwrap();
        assert_eq!(m.assignment(), &[1, 1, 1, 0, 0, 0, 1, 1, 0, 0]);
        let m = build_mapper(7, &[0.6, 0.2, 0.2], ORACLE_SEED).unwrap();
        assert_eq!(m.assignment(), &[0, 2, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn mapper_rejects_bad_arguments() {
        assert!(build_mapper(0, &[1.0], [0; 32]).is_err());
        assert!(build_mapper(4, &[], [0; 32]).is_err());
        assert!(build_mapper(4, &[0.5, 0.4], [0; 32]).is_err());
        assert!(build_mapper(4, &[1.5, -0.5], [0; 32]).is_err());
    }

    #[test]
    fn permutation_matches_reference() {
        let zero = [0u8; 32];
        assert_eq!(derive_permutation(&zero, 1, 0, 8).as_slice(), &[5, 7, 0, 3, 1, 4, 6, 2]);
        assert_eq!(derive_permutation(&zero, 2, 0, 8).as_slice(), &[2, 5, 1, 0, 4, 3, 7, 6]);
        assert_eq!(
            derive_permutation(&zero, 1, 3, 20).as_slice(),
            &[4, 9, 0, 3, 8, 19, 12, 11, 5, 7, 16, 18, 15, 17, 2, 1, 6, 13, 10, 14]
        );
    }

    #[test]
    fn small_permutations_are_trivial() {
        assert!(derive_permutation(&[3; 32], 9, 0, 0).is_empty());
        assert!(derive_permutation(&[3; 32], 9, 0, 1).is_identity());
        let a = derive_permutation(&[3; 32], 9, 2, 50);
        let b = derive_permutation(&[3; 32], 9, 2, 50);
        assert_eq!(a, b);
    }

    #[test]
    fn partition_example() {
        let mut m = build_mapper(4, &[0.5, 0.5], [0; 32]).unwrap();
        m.assignment = vec![0, 1, 0, 1];
        m.positions = vec![vec![0, 2], vec![1, 3]];
        let p = partition(&[10.0, 20.0, 30.0, 40.0], &m).unwrap();
        assert_eq!(p.parts, vec![vec![10.0, 30.0], vec![20.0, 40.0]]);
        assert_eq!(merge(&p, &m).unwrap(), vec![10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn single_part_is_identity() {
        let m = build_mapper(1, &[1.0], [1; 32]).unwrap();
        let p = partition(&[2.5], &m).unwrap();
        assert_eq!(p.parts, vec![vec![2.5]]);
        assert_eq!(merge(&p, &m).unwrap(), vec![2.5]);
    }

    #[test]
    fn length_mismatches_are_rejected() {
        let m = build_mapper(4, &[0.5, 0.5], [0; 32]).unwrap();
        assert!(partition(&[1.0; 3], &m).is_err());
        let bad = PartitionedUpdate::new(vec![vec![1.0; 3], vec![1.0]]);
        assert!(merge(&bad, &m).is_err());
        let spec = derive_permutation(&[0; 32], 1, 0, 3);
        assert!(permute(&[1.0; 4], &spec).is_err());
        assert!(unpermute(&[1.0; 2], &spec).is_err());
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let spec = PermutationSpec::identity(5);
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(permute(&x, &spec).unwrap(), x);
    }

    #[test]
    fn permute_places_element_at_permuted_position() {
        let spec = derive_permutation(&[0; 32], 1, 0, 8);
        let x: Vec<f64> = (0..8).map(f64::from).collect();
        let y = permute(&x, &spec).unwrap();
        for (i, &p) in spec.as_slice().iter().enumerate() {
            assert_eq!(y[p], x[i]);
        }
    }

    #[test]
    fn round_change_reshuffles() {
        // P(identity) = 1/m!, so at m = 6 a collision across 100 keys is
        // astronomically unlikely.
        let mut changed = 0;
        for s in 0..100u8 {
            let key = [s; 32];
            let a = derive_permutation(&key, 1, 0, 6);
            let b = derive_permutation(&key, 2, 0, 6);
            if a.as_slice() != b.as_slice() {
                changed += 1;
            }
        }
        assert!(changed >= 99, "only {changed} of 100 keys reshuffled");
    }

    #[test]
    fn payload_is_little_endian_ieee() {
        assert_eq!(encode_f64_payload(&[1.0]), "AAAAAAAA8D8=");
        assert_eq!(decode_f64_payload("AAAAAAAA8D8=").unwrap(), vec![1.0]);
        assert!(decode_f64_payload("AAAA").is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(ParameterVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(ParameterVector::new(vec![f64::INFINITY]).is_err());
        assert!(ParameterVector::new(vec![0.0, -2.0]).is_ok());
    }

    #[test]
    fn seed_hex_round_trip() {
        let s = ORACLE_SEED;
        assert_eq!(parse_seed_hex(&seed_hex(&s)).unwrap(), s);
        assert!(parse_seed_hex("abc").is_err());
        assert!(parse_seed_hex(&"zz".repeat(32)).is_err());
    }
}
