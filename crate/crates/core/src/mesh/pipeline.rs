//! The per-round data path, free of any networking: what a party sends each
//! aggregator, what an aggregator computes, and how a party reassembles the
//! result. Nodes call these; tests compose them directly.

use num_bigint::BigUint;

use crate::error::{Error, Result};
use crate::fusion::{apply_gradient_step, fuse, FusionAlgorithm, FusionConfig};
use crate::he::{fuse_encrypted, Ciphertext, FixedPointCodec, PaillierKeypair, PaillierPublicKey};
use crate::tensor::{
    derive_permutation, ensure_finite, merge, partition, ModelMapper, PartitionedUpdate,
    PermutationSpec, Seed,
};

/// A party's shared secrets: the model-mapper and, when shuffling is on, the
/// permutation key.
#[derive(Clone, Debug)]
pub struct PartySecrets {
    pub mapper: ModelMapper,
    pub permutation_key: Option<Seed>,
}

impl PartySecrets {
    pub fn spec(&self, round_id: u64, partition_index: usize) -> PermutationSpec {
        let m = self.mapper.count(partition_index);
        match &self.permutation_key {
            Some(key) => derive_permutation(key, round_id, partition_index as u32, m),
            None => PermutationSpec::identity(m),
        }
    }

    /// Partition, then shuffle each part for this round.
    pub fn outbound(&self, update: &[f64], round_id: u64) -> Result<Vec<Vec<f64>>> {
        ensure_finite(update)?;
        let parts = partition(update, &self.mapper)?;
        parts
            .parts
            .iter()
            .enumerate()
            .map(|(a, p)| self.spec(round_id, a).permute(p))
            .collect()
    }

    /// Unshuffle each fused part and merge to original positions.
    pub fn inbound(&self, fused: &[Vec<f64>], round_id: u64) -> Result<Vec<f64>> {
        if fused.len() != self.mapper.num_aggregators() {
            return Err(Error::protocol(format!(
                "{} fused parts for {} aggregators",
                fused.len(),
                self.mapper.num_aggregators()
            )));
        }
        let parts = fused
            .iter()
            .enumerate()
            .map(|(a, p)| {
                if p.len() != self.mapper.count(a) {
                    return Err(Error::protocol(format!(
                        "fused part {a} has {} values, expected {}",
                        p.len(),
                        self.mapper.count(a)
                    )));
                }
                self.spec(round_id, a).unpermute(p)
            })
            .collect::<Result<Vec<_>>>()?;
        merge(&PartitionedUpdate::new(parts).at_round(round_id), &self.mapper)
    }
}

/// Aggregator-side plaintext fusion over uploads in party order.
pub fn aggregator_fuse(cfg: &FusionConfig, uploads: &[Vec<f64>]) -> Result<Vec<f64>> {
    fuse(cfg.algorithm, uploads, &cfg.party_weights, cfg.byzantine_f)
}

/// Party-side update rule: FedSGD steps by the fused gradient, every other
/// algorithm replaces the model.
pub fn apply_fused(cfg: &FusionConfig, theta: &mut Vec<f64>, fused: Vec<f64>) -> Result<()> {
    if cfg.algorithm.uploads_gradients() {
        apply_gradient_step(theta, &fused, cfg.learning_rate)
    } else {
        if fused.len() != theta.len() {
            return Err(Error::protocol(format!(
                "fused model has {} values, expected {}",
                fused.len(),
                theta.len()
            )));
        }
        *theta = fused;
        Ok(())
    }
}

/// Full round through A aggregators, as every party computes it.
pub fn decentralized_round(
    secrets: &PartySecrets,
    cfg: &FusionConfig,
    updates: &[Vec<f64>],
    round_id: u64,
) -> Result<Vec<f64>> {
    let outbound = updates
        .iter()
        .map(|u| secrets.outbound(u, round_id))
        .collect::<Result<Vec<_>>>()?;
    let fused = (0..secrets.mapper.num_aggregators())
        .map(|a| {
            let view: Vec<Vec<f64>> = outbound.iter().map(|parts| parts[a].clone()).collect();
            aggregator_fuse(cfg, &view)
        })
        .collect::<Result<Vec<_>>>()?;
    secrets.inbound(&fused, round_id)
}

/// The single-aggregator, unpartitioned reference.
pub fn centralized_round(cfg: &FusionConfig, updates: &[Vec<f64>]) -> Result<Vec<f64>> {
    if cfg.algorithm == FusionAlgorithm::Paillier {
        return crate::fusion::fuse_weighted_average(updates, &cfg.party_weights);
    }
    aggregator_fuse(cfg, updates)
}

/// Parties hold the whole keypair, so they encrypt with the factorisation.
pub fn encrypt_part(kp: &PaillierKeypair, values: &[f64]) -> Result<Vec<Ciphertext>> {
    let codec = FixedPointCodec::new(kp.public());
    kp.encrypt_vector(&codec.encode_vector(values)?)
}

/// Aggregator-side encrypted fusion: Π c_i^{n_i}.
pub fn aggregator_fuse_encrypted(
    pk: &PaillierPublicKey,
    weights: &[u64],
    uploads: &[Vec<Ciphertext>],
) -> Result<Vec<Ciphertext>> {
    fuse_encrypted(pk, uploads, weights)
}

/// Decrypts Σ n_i·x_i and divides by n = Σ n_i.
pub fn decrypt_average(kp: &PaillierKeypair, total_weight: u64, fused: &[Ciphertext]) -> Result<Vec<f64>> {
    let codec = FixedPointCodec::new(kp.public());
    let n = total_weight as f64;
    kp.decrypt_vector(fused)?
        .iter()
        .map(|m: &BigUint| Ok(codec.decode(m) / n))
        .collect()
}

/// Encrypted counterpart of [`decentralized_round`].
pub fn decentralized_paillier_round(
    secrets: &PartySecrets,
    kp: &PaillierKeypair,
    weights: &[u64],
    updates: &[Vec<f64>],
    round_id: u64,
) -> Result<Vec<f64>> {
    let pk = kp.public();
    let outbound = updates
        .iter()
        .map(|u| {
            secrets
                .outbound(u, round_id)?
                .iter()
                .map(|p| encrypt_part(kp, p))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let total: u64 = weights.iter().sum();
    let fused = (0..secrets.mapper.num_aggregators())
        .map(|a| {
            let view: Vec<Vec<Ciphertext>> = outbound.iter().map(|parts| parts[a].clone()).collect();
            decrypt_average(kp, total, &aggregator_fuse_encrypted(pk, weights, &view)?)
        })
        .collect::<Result<Vec<_>>>()?;
    secrets.inbound(&fused, round_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::build_mapper;

    #[test]
    fn hand_sum_through_two_aggregators() {
        let secrets = PartySecrets {
            mapper: build_mapper(4, &[0.5, 0.5], [3; 32]).unwrap(),
            permutation_key: Some([9; 32]),
        };
        let cfg = FusionConfig {
            algorithm: FusionAlgorithm::GradientSum,
            party_weights: vec![1, 1],
            byzantine_f: 0,
            learning_rate: 1.0,
        };
        let updates = vec![vec![1.0, 1.0, 1.0, 1.0], vec![1.0, 2.0, 3.0, 4.0]];
        for round in 1..=3 {
            let out = decentralized_round(&secrets, &cfg, &updates, round).unwrap();
            assert_eq!(out, vec![2.0, 3.0, 4.0, 5.0]);
        }
    }

    #[test]
    fn single_aggregator_without_shuffle_uploads_the_update() {
        let secrets = PartySecrets {
            mapper: build_mapper(5, &[1.0], [0; 32]).unwrap(),
            permutation_key: None,
        };
        let u = vec![0.5, -1.0, 2.0, 1e-300, 7.0];
        let out = secrets.outbound(&u, 4).unwrap();
        assert_eq!(out, vec![u]);
    }

    #[test]
    fn wrong_length_fused_part_is_protocol_error() {
        let secrets = PartySecrets {
            mapper: build_mapper(4, &[0.5, 0.5], [3; 32]).unwrap(),
            permutation_key: None,
        };
        let err = secrets.inbound(&[vec![1.0], vec![1.0, 2.0]], 1).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn non_finite_updates_are_rejected() {
        let secrets = PartySecrets {
            mapper: build_mapper(2, &[1.0], [0; 32]).unwrap(),
            permutation_key: None,
        };
        assert!(secrets.outbound(&[1.0, f64::NAN], 1).is_err());
    }
}
