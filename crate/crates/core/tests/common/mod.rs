#![allow(dead_code)]

use serde_json::json;
use splitagg::config::ExperimentConfig;

pub struct Setup<'a> {
    pub parties: usize,
    pub proportions: &'a [f64],
    pub algorithm: &'a str,
    pub permute: bool,
    pub rounds: u64,
    /// (classes, features, examples per party); None means a bare vector of
    /// `model_size` coordinates.
    pub trainer: Option<(usize, usize, u64)>,
    pub model_size: usize,
    pub learning_rate: f64,
    pub local_epochs: u32,
}

impl Default for Setup<'_> {
    fn default() -> Self {
        Self {
            parties: 2,
            proportions: &[0.5, 0.5],
            algorithm: "weighted_average",
            permute: true,
            rounds: 1,
            trainer: None,
            model_size: 4,
            learning_rate: 0.1,
            local_epochs: 1,
        }
    }
}

impl Setup<'_> {
    pub fn build(&self) -> ExperimentConfig {
        let a = self.proportions.len();
        let parties: Vec<_> = (0..self.parties)
            .map(|i| {
                if self.trainer.is_some() {
                    json!({"id": format!("party-{i}")})
                } else {
                    json!({"id": format!("party-{i}"), "weight": 1 + i as u64})
                }
            })
            .collect();
        let mut v = json!({
            "aggregators": (0..a).map(|i| format!("agg{i}:7000")).collect::<Vec<_>>(),
            "attestation_server": "as:7000",
            "parties": parties,
            "model_size": self.model_size,
            "proportions": self.proportions,
            "mapper_seed_hex": "11".repeat(32),
            "permutation_key_hex": "22".repeat(32),
            "algorithm": self.algorithm,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "learning_rate": self.learning_rate,
            "permute": self.permute,
            "round_timeout_secs": 30,
        });
        if let Some((c, d, n)) = self.trainer {
            v["model_size"] = json!(c * d + c);
            v["trainer"] = json!({
                "classes": c,
                "features": d,
                "examples_per_party": n,
                "data_seed_hex": "33".repeat(32),
            });
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        cfg.validate().unwrap();
        cfg
    }
}
