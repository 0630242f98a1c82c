//! End-to-end experiment driver: runs a whole session in one process over
//! the in-memory transport, scores every round, and replays the same
//! training against the single-aggregator reference.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{GroundTruth, Trace, TraceHeader};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionAlgorithm;
use crate::he::{keygen, KeypairFile, PaillierKeypair};
use crate::mesh::pipeline::{apply_fused, centralized_round};
use crate::mesh::{
    model_checksum, run_session, MemNetwork, SessionOptions, SessionRun, TrainerSource, UpdateSource,
};
use crate::tensor::seed_hex;
use crate::trainer::{accuracy, forward_loss, DenseSoftmaxModel, Example};

/// One line of the metrics file per completed round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round_id: u64,
    /// Initiator's start-round to round-done time.
    pub wall_ms: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub algorithm: FusionAlgorithm,
    pub aggregators: usize,
    pub parties: usize,
    pub permute: bool,
    /// Largest per-coordinate gap to the single-aggregator reference model.
    pub oracle_max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub summary: bool,
    pub rounds: u64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub max_oracle_deviation: f64,
    pub mean_round_ms: f64,
    pub model_checksum: String,
}

#[derive(Debug)]
pub struct SimulationResult {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    /// Model after each round as the first party holds it.
    pub history: Vec<Vec<f64>>,
    pub trace: Option<Trace>,
    pub session: SessionRun,
}

impl SimulationResult {
    pub fn metrics_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.summary)?);
        out.push('\n');
        Ok(out)
    }
}

#[derive(Default)]
pub struct SimulateOptions {
    pub record_trace: bool,
    /// Shared party keypair for encrypted fusion; loaded or generated from
    /// the config when absent.
    pub paillier: Option<Arc<PaillierKeypair>>,
}

/// Replaces the synthetic-data seed with one derived from `seed`.
pub fn reseed(cfg: &mut ExperimentConfig, seed: u64) {
    if let Some(t) = cfg.trainer.as_mut() {
        let mut h = Sha256::new();
        h.update(b"data-seed");
        h.update(seed.to_be_bytes());
        t.data_seed_hex = seed_hex(&h.finalize().into());
    }
}

pub fn load_keypair(path: &Path) -> Result<PaillierKeypair> {
    let text = std::fs::read_to_string(path)?;
    let file: KeypairFile = serde_json::from_str(&text)?;
    PaillierKeypair::from_json(&file)
}

pub fn save_keypair(kp: &PaillierKeypair, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(&kp.to_json())?)?;
    Ok(())
}

/// The party keypair for a Paillier session: the configured key file, or a
/// fresh key when none is configured.
pub fn session_keypair(cfg: &ExperimentConfig) -> Result<Option<Arc<PaillierKeypair>>> {
    if cfg.algorithm != FusionAlgorithm::Paillier {
        return Ok(None);
    }
    let kp = match &cfg.paillier.key_file {
        Some(path) => load_keypair(path)?,
        None => keygen(cfg.paillier.key_bits)?,
    };
    Ok(Some(Arc::new(kp)))
}

/// Wraps a source and keeps each upload with the batch it came from.
struct RecordingSource {
    inner: TrainerSource,
    party_id: String,
    sink: Arc<Mutex<Vec<GroundTruth>>>,
}

impl UpdateSource for RecordingSource {
    fn initial_model(&self) -> Vec<f64> {
        self.inner.initial_model()
    }

    fn update(&mut self, round_id: u64, model: &[f64]) -> Result<Vec<f64>> {
        let update = self.inner.update(round_id, model)?;
        self.sink.lock().expect("trace sink").push(GroundTruth {
            round_id,
            party_id: self.party_id.clone(),
            batch: self.inner.data.clone(),
            update: update.clone(),
        });
        Ok(update)
    }
}

fn trainer_sources(cfg: &ExperimentConfig) -> Result<Vec<TrainerSource>> {
    cfg.ordered_parties()?
        .iter()
        .map(|(id, _)| TrainerSource::from_config(cfg, id))
        .collect()
}

/// Every party's data, for global loss and accuracy.
pub fn pooled_data(cfg: &ExperimentConfig) -> Result<Vec<Example>> {
    Ok(trainer_sources(cfg)?.into_iter().flat_map(|s| s.data).collect())
}

/// The single-aggregator reference: the same parties and training, fused
/// over whole vectors with no partitioning or shuffling.
pub fn centralized_trajectory(cfg: &ExperimentConfig) -> Result<Vec<Vec<f64>>> {
    let mut sources = trainer_sources(cfg)?;
    let fusion = cfg.fusion_config()?;
    let mut theta = sources[0].initial_model();
    let mut out = Vec::with_capacity(cfg.rounds as usize);
    for round_id in 1..=cfg.rounds {
        let updates = sources
            .iter_mut()
            .map(|s| s.update(round_id, &theta))
            .collect::<Result<Vec<_>>>()?;
        apply_fused(&fusion, &mut theta, centralized_round(&fusion, &updates)?)?;
        out.push(theta.clone());
    }
    Ok(out)
}

pub fn max_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks that every party ended every round on the same model.
fn check_agreement(run: &SessionRun) -> Result<()> {
    let first = &run.parties[0];
    for p in &run.parties[1..] {
        if p.final_model != first.final_model {
            return Err(Error::protocol(format!(
                "{} and {} disagree on the final model",
                first.party_id, p.party_id
            )));
        }
    }
    Ok(())
}

/// Scores a per-round model history against pooled data and the
/// single-aggregator reference. `wall_ms` may be shorter than the history;
/// missing rounds are recorded as NaN.
pub fn score_history(
    cfg: &ExperimentConfig,
    history: &[Vec<f64>],
    wall_ms: &[f64],
) -> Result<(Vec<MetricsRecord>, RunSummary)> {
    let t = cfg
        .trainer
        .as_ref()
        .ok_or_else(|| Error::invalid("scoring needs a trainer section in the config"))?;
    let reference = centralized_trajectory(cfg)?;
    let pooled = pooled_data(cfg)?;
    let mut records = Vec::with_capacity(history.len());
    for (i, theta) in history.iter().enumerate() {
        let model = DenseSoftmaxModel::from_flat(t.classes, t.features, theta)?;
        let (loss, _) = forward_loss(&model, &pooled)?;
        let oracle = reference
            .get(i)
            .ok_or_else(|| Error::protocol(format!("history has more than {} rounds", reference.len())))?;
        records.push(MetricsRecord {
            round_id: i as u64 + 1,
            wall_ms: wall_ms.get(i).copied().unwrap_or(f64::NAN),
            loss,
            accuracy: accuracy(&model, &pooled),
            algorithm: cfg.algorithm,
            aggregators: cfg.num_aggregators(),
            parties: cfg.parties.len(),
            permute: cfg.permute,
            oracle_max_deviation: max_deviation(theta, oracle),
        });
    }
    let last = records
        .last()
        .ok_or_else(|| Error::protocol("session completed no rounds"))?;
    let summary = RunSummary {
        summary: true,
        rounds: records.len() as u64,
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        max_oracle_deviation: records.iter().map(|r| r.oracle_max_deviation).fold(0.0, f64::max),
        mean_round_ms: records.iter().map(|r| r.wall_ms).sum::<f64>() / records.len() as f64,
        model_checksum: model_checksum(history.last().expect("non-empty")),
    };
    Ok((records, summary))
}

pub fn simulate(cfg: &ExperimentConfig, opts: SimulateOptions) -> Result<SimulationResult> {
    cfg.validate()?;
    if cfg.trainer.is_none() {
        return Err(Error::invalid("simulate needs a trainer section in the config"));
    }
    let paillier = match opts.paillier {
        Some(kp) => Some(kp),
        None => session_keypair(cfg)?,
    };

    let sink = Arc::new(Mutex::new(Vec::new()));
    let sources: Vec<Box<dyn UpdateSource>> = cfg
        .ordered_parties()?
        .into_iter()
        .map(|(id, _)| -> Result<Box<dyn UpdateSource>> {
            let inner = TrainerSource::from_config(cfg, &id)?;
            Ok(if opts.record_trace {
                Box::new(RecordingSource {
                    inner,
                    party_id: id,
                    sink: sink.clone(),
                })
            } else {
                Box::new(inner)
            })
        })
        .collect::<Result<_>>()?;

    let net = MemNetwork::new();
    let session = run_session(
        cfg,
        &net,
        sources,
        SessionOptions {
            record_trace: opts.record_trace,
            record_history: true,
            paillier,
            party_secrets: HashMap::new(),
            launches: HashMap::new(),
            connect_patience: None,
        },
    )?;
    check_agreement(&session)?;

    let history = session.parties[0].history.clone();
    let initiator = ExperimentConfig::agg_id(cfg.initiator);
    let wall = session
        .aggregators
        .iter()
        .find(|a| a.agg_id == initiator)
        .map(|a| a.round_wall_ms.clone())
        .unwrap_or_default();
    let (records, summary) = score_history(cfg, &history, &wall)?;

    let trace = if opts.record_trace {
        let t = cfg.trainer.as_ref().expect("checked above");
        let mut uploads: Vec<_> = session
            .aggregators
            .iter()
            .flat_map(|a| a.uploads.iter().cloned())
            .collect();
        uploads.sort_by(|a, b| {
            (a.round_id, &a.party_id, a.agg_index).cmp(&(b.round_id, &b.party_id, b.agg_index))
        });
        let mut truth = std::mem::take(&mut *sink.lock().expect("trace sink"));
        truth.sort_by(|a, b| (a.round_id, &a.party_id).cmp(&(b.round_id, &b.party_id)));
        Some(Trace {
            header: TraceHeader {
                model_size: cfg.model_size,
                classes: t.classes,
                features: t.features,
                proportions: cfg.proportions.clone(),
                permute: cfg.permute,
                mapper_seed_hex: cfg.mapper_seed_hex.clone(),
                permutation_key_hex: cfg.permutation_key_hex.clone(),
            },
            uploads,
            truth,
        })
    } else {
        None
    };

    Ok(SimulationResult {
        records,
        summary,
        history,
        trace,
        session,
    })
}
