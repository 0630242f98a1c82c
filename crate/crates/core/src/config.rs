//! Session and experiment configuration, shared by every node.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::LeakScenario;
use crate::error::{Error, Result};
use crate::fusion::{FusionAlgorithm, FusionConfig};
use crate::he::SUPPORTED_KEY_BITS;
use crate::mesh::wire::DEFAULT_MAX_FRAME;
use crate::tensor::{exact_counts, parse_seed_hex, Seed};
use crate::trainer::{param_count, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartyEntry {
    pub id: String,
    /// Training-example count n_i. Defaults to `trainer.examples_per_party`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    /// Seeds the simulated manufacturer root and platform keys.
    pub seed_hex: String,
    pub api_version: String,
    pub min_api_version: String,
    pub policy: u8,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        Self {
            seed_hex: "5a".repeat(32),
            api_version: "0.22".into(),
            min_api_version: "0.17".into(),
            policy: 0x01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaillierConfig {
    pub key_bits: u64,
    /// Shared party keypair; generated on the fly in single-process runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_file: Option<PathBuf>,
}

impl Default for PaillierConfig {
    fn default() -> Self {
        Self {
            key_bits: 512,
            key_file: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub classes: usize,
    pub features: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples_per_party: Option<u64>,
    /// Non-IID skew ρ; absent for IID splits.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skew: Option<f64>,
    #[serde(default = "default_separation")]
    pub separation: f64,
    pub data_seed_hex: String,
}

fn default_separation() -> f64 {
    4.0
}

fn default_timeout() -> u64 {
    300
}

fn default_max_frame() -> usize {
    DEFAULT_MAX_FRAME
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `host:port` per aggregator; the position is the aggregator index.
    pub aggregators: Vec<String>,
    pub attestation_server: String,
    pub parties: Vec<PartyEntry>,
    pub model_size: usize,
    pub proportions: Vec<f64>,
    pub mapper_seed_hex: String,
    pub permutation_key_hex: String,
    pub algorithm: FusionAlgorithm,
    pub rounds: u64,
    pub local_epochs: u32,
    pub learning_rate: f64,
    pub permute: bool,
    #[serde(default)]
    pub byzantine_f: usize,
    /// Index of the aggregator that drives rounds.
    #[serde(default)]
    pub initiator: usize,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: u64,
    #[serde(default = "default_max_frame")]
    pub max_frame_bytes: usize,
    #[serde(default)]
    pub platform: PlatformConfig,
    #[serde(default)]
    pub paillier: PaillierConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<TrainerConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scenarios: Vec<LeakScenario>,
}

/// The part of the configuration an aggregator is launched with; its digest
/// is the attested measurement. Party-held secrets are excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatorLaunch {
    pub index: usize,
    pub aggregators: Vec<String>,
    pub attestation_server: String,
    pub initiator: usize,
    pub parties: Vec<(String, u64)>,
    pub model_size: usize,
    pub proportions: Vec<f64>,
    pub algorithm: FusionAlgorithm,
    pub byzantine_f: usize,
    pub rounds: u64,
    pub round_timeout_secs: u64,
    pub max_frame_bytes: usize,
}

fn check_hex(field: &str, s: &str) -> Result<Seed> {
    parse_seed_hex(s).map_err(|e| Error::invalid(format!("{field}: {e}")))
}

fn check_version(field: &str, v: &str) -> Result<()> {
    let ok = v
        .split_once('.')
        .map(|(a, b)| a.parse::<u32>().is_ok() && b.parse::<u32>().is_ok())
        .unwrap_or(false);
    if !ok {
        return Err(Error::invalid(format!("{field}: expected MAJOR.MINOR, got {v:?}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("cannot read config {}: {e}", path.display()),
            ))
        })?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_aggregators(&self) -> usize {
        self.aggregators.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.aggregators.is_empty() {
            return Err(Error::invalid("at least one aggregator is required"));
        }
        let unique: HashSet<&String> = self.aggregators.iter().collect();
        if unique.len() != self.aggregators.len() {
            return Err(Error::invalid("aggregator addresses must be distinct"));
        }
        if self.aggregators.contains(&self.attestation_server) {
            return Err(Error::invalid("attestation server shares an aggregator address"));
        }
        if self.proportions.len() != self.aggregators.len() {
            return Err(Error::invalid(format!(
                "{} proportions for {} aggregators",
                self.proportions.len(),
                self.aggregators.len()
            )));
        }
        if self.proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("proportions must be finite and non-negative"));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("proportions sum to {total}, not 1")));
        }
        if self.model_size == 0 {
            return Err(Error::invalid("model_size must be at least 1"));
        }
        if self.initiator >= self.aggregators.len() {
            return Err(Error::invalid(format!(
                "initiator {} out of range for {} aggregators",
                self.initiator,
                self.aggregators.len()
            )));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        if self.round_timeout_secs == 0 {
            return Err(Error::invalid("round_timeout_secs must be positive"));
        }
        check_hex("mapper_seed_hex", &self.mapper_seed_hex)?;
        check_hex("permutation_key_hex", &self.permutation_key_hex)?;
        check_hex("platform.seed_hex", &self.platform.seed_hex)?;
        check_version("platform.api_version", &self.platform.api_version)?;
        check_version("platform.min_api_version", &self.platform.min_api_version)?;

        if self.parties.is_empty() {
            return Err(Error::invalid("at least one party is required"));
        }
        let mut ids = HashSet::new();
        for p in &self.parties {
            if p.id.is_empty() {
                return Err(Error::invalid("party ids must be non-empty"));
            }
            if !ids.insert(&p.id) {
                return Err(Error::invalid(format!("duplicate party id {:?}", p.id)));
            }
        }
        self.fusion_config()?.validate()?;

        if self.algorithm == FusionAlgorithm::Paillier
            && !SUPPORTED_KEY_BITS.contains(&self.paillier.key_bits)
        {
            return Err(Error::invalid(format!(
                "unsupported Paillier key size {}",
                self.paillier.key_bits
            )));
        }

        if let Some(t) = &self.trainer {
            self.synthetic_spec().expect("trainer present").validate()?;
            let expected = param_count(t.classes, t.features);
            if expected != self.model_size {
                return Err(Error::invalid(format!(
                    "model_size {} does not match a {}x{} softmax model ({expected})",
                    self.model_size, t.classes, t.features
                )));
            }
        }
        for s in &self.scenarios {
            if let Some(&a) = s.leaked_partitions.iter().find(|&&a| a >= self.aggregators.len()) {
                return Err(Error::invalid(format!(
                    "scenario {:?} leaks partition {a}, which does not exist",
                    s.name
                )));
            }
        }
        Ok(())
    }

    /// Parties sorted by id: the fusion accumulation order.
    pub fn ordered_parties(&self) -> Result<Vec<(String, u64)>> {
        let default = self.trainer.as_ref().and_then(|t| t.examples_per_party);
        let mut out = self
            .parties
            .iter()
            .map(|p| {
                let w = p.weight.or(default).ok_or_else(|| {
                    Error::invalid(format!(
                        "party {:?} has no weight and no examples_per_party default",
                        p.id
                    ))
                })?;
                Ok((p.id.clone(), w))
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(out)
    }

    pub fn party_index(&self, party_id: &str) -> Result<usize> {
        self.ordered_parties()?
            .iter()
            .position(|(id, _)| id == party_id)
            .ok_or_else(|| Error::invalid(format!("party {party_id:?} is not in the config")))
    }

    pub fn fusion_config(&self) -> Result<FusionConfig> {
        Ok(FusionConfig {
            algorithm: self.algorithm,
            party_weights: self.ordered_parties()?.into_iter().map(|(_, w)| w).collect(),
            byzantine_f: self.byzantine_f,
            learning_rate: self.learning_rate,
        })
    }

    pub fn mapper_seed(&self) -> Result<Seed> {
        check_hex("mapper_seed_hex", &self.mapper_seed_hex)
    }

    pub fn permutation_key(&self) -> Result<Seed> {
        check_hex("permutation_key_hex", &self.permutation_key_hex)
    }

    pub fn platform_seed(&self) -> Result<Seed> {
        check_hex("platform.seed_hex", &self.platform.seed_hex)
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        exact_counts(self.model_size, &self.proportions)
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        let t = self.trainer.as_ref()?;
        Some(SyntheticSpec {
            classes: t.classes,
            features: t.features,
            separation: t.separation,
            skew: t.skew,
            seed: parse_seed_hex(&t.data_seed_hex).unwrap_or([0; 32]),
        })
    }

    pub fn agg_id(index: usize) -> String {
        format!("agg-{index}")
    }

    pub fn aggregator_launch(&self, index: usize) -> Result<AggregatorLaunch> {
        if index >= self.aggregators.len() {
            return Err(Error::invalid(format!("no aggregator with index {index}")));
        }
        Ok(AggregatorLaunch {
            index,
            aggregators: self.aggregators.clone(),
            attestation_server: self.attestation_server.clone(),
            initiator: self.initiator,
            parties: self.ordered_parties()?,
            model_size: self.model_size,
            proportions: self.proportions.clone(),
            algorithm: self.algorithm,
            byzantine_f: self.byzantine_f,
            rounds: self.rounds,
            round_timeout_secs: self.round_timeout_secs,
            max_frame_bytes: self.max_frame_bytes,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample() -> ExperimentConfig {
        serde_json::from_str(
            r#"{
            "aggregators": ["agg0", "agg1"],
            "attestation_server": "as",
            "parties": [{"id": "p1", "weight": 3}, {"id": "p0", "weight": 1}],
            "model_size": 4,
            "proportions": [0.5, 0.5],
            "mapper_seed_hex": "0000000000000000000000000000000000000000000000000000000000000001",
            "permutation_key_hex": "0000000000000000000000000000000000000000000000000000000000000002",
            "algorithm": "gradient_sum",
            "rounds": 2,
            "local_epochs": 1,
            "learning_rate": 0.1,
            "permute": true
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn sample_is_valid_and_ordered() {
        let cfg = sample();
        cfg.validate().unwrap();
        assert_eq!(
            cfg.ordered_parties().unwrap(),
            vec![("p0".to_string(), 1), ("p1".to_string(), 3)]
        );
        assert_eq!(cfg.round_timeout_secs, 300);
        assert_eq!(cfg.partition_sizes(), vec![2, 2]);
    }

    #[test]
    fn validation_errors() {
        let mut c = sample();
        c.mapper_seed_hex = "abc".into();
        assert!(c.validate().is_err());
        let mut c = sample();
        c.proportions = vec![0.5, 0.6];
        assert!(c.validate().is_err());
        let mut c = sample();
        c.parties.push(PartyEntry { id: "p0".into(), weight: Some(1) });
        assert!(c.validate().is_err());
        let mut c = sample();
        c.initiator = 2;
        assert!(c.validate().is_err());
        let mut c = sample();
        c.algorithm = FusionAlgorithm::Krum;
        assert!(c.validate().is_err());
        let mut c = sample();
        c.trainer = Some(TrainerConfig {
            classes: 2,
            features: 3,
            examples_per_party: None,
            skew: None,
            separation: 4.0,
            data_seed_hex: "00".repeat(32),
        });
        assert!(c.validate().is_err(), "model size mismatch");
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn launch_config_omits_secrets() {
        let cfg = sample();
        let text = serde_json::to_string(&cfg.aggregator_launch(1).unwrap()).unwrap();
        assert!(!text.contains(&cfg.permutation_key_hex));
        assert!(!text.contains(&cfg.mapper_seed_hex));
    }
}
