//! Split aggregation for federated learning.
//!
//! The model-update vector is partitioned across several attested
//! aggregators by a secret random mapper, and each partition is shuffled by a
//! per-round secret permutation before upload. Each aggregator fuses only its
//! own shuffled partition; parties invert the permutation and reassemble.

pub mod attack;
pub mod attestation;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod he;
pub mod mesh;
pub mod tensor;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use fusion::{fuse, FusionAlgorithm, FusionConfig};
pub use tensor::{
    build_mapper, derive_permutation, merge, partition, permute, unpermute, ModelMapper,
    ParameterVector, PartitionedUpdate, PermutationSpec, Seed,
};
