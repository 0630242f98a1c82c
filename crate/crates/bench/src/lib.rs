//! Workload builders shared by the criterion benches.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::json;
use splitagg::ExperimentConfig;

/// `n` update vectors of length `k`, uniform in [-1, 1).
pub fn random_updates(n: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

/// Equal split over `a` aggregators, summing to exactly 1.
pub fn equal_proportions(a: usize) -> Vec<f64> {
    let mut p = vec![1.0 / a as f64; a];
    let head: f64 = p[..a - 1].iter().sum();
    p[a - 1] = 1.0 - head;
    p
}

/// A small trained session for end-to-end round timing over the in-memory
/// transport.
pub fn session_config(aggregators: usize, parties: usize, rounds: u64, algorithm: &str) -> ExperimentConfig {
    let (c, d) = (10, 100);
    let cfg: ExperimentConfig = serde_json::from_value(json!({
        "aggregators": (0..aggregators).map(|i| format!("agg{i}:7000")).collect::<Vec<_>>(),
        "attestation_server": "as:7000",
        "parties": (0..parties).map(|i| json!({"id": format!("party-{i}")})).collect::<Vec<_>>(),
        "model_size": c * d + c,
        "proportions": equal_proportions(aggregators),
        "mapper_seed_hex": "11".repeat(32),
        "permutation_key_hex": "22".repeat(32),
        "algorithm": algorithm,
        "rounds": rounds,
        "local_epochs": 1,
        "learning_rate": 0.1,
        "permute": true,
        "round_timeout_secs": 120,
        "paillier": {"key_bits": 1024},
        "trainer": {
            "classes": c,
            "features": d,
            "examples_per_party": 20,
            "data_seed_hex": "33".repeat(32),
        },
    }))
    .expect("bench config");
    cfg.validate().expect("bench config validates");
    cfg
}
