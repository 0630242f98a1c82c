//! Party node: authenticates every aggregator, registers, and runs the
//! partition/permute/upload → unpermute/merge/apply loop.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use log::{debug, info};
use sha2::{Digest, Sha256};

use super::hub::{ConnId, Event, Hub};
use super::pipeline::{apply_fused, decrypt_average, encrypt_part, PartySecrets};
use super::transport::{connect_with_retry, Network};
use super::wire::WireMessage;
use crate::attestation::{key_from_b64, ChallengeBook, RejectReason};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionAlgorithm, FusionConfig};
use crate::he::{Ciphertext, PaillierKeypair};
use crate::tensor::{build_mapper, decode_f64_payload, encode_f64_payload};
use crate::trainer::{gradient, local_train, DenseSoftmaxModel, Example, TrainMode};

/// Produces the vector a party uploads in a round.
pub trait UpdateSource: Send {
    fn initial_model(&self) -> Vec<f64>;
    fn update(&mut self, round_id: u64, model: &[f64]) -> Result<Vec<f64>>;
}

/// Local training on the party's synthetic shard.
pub struct TrainerSource {
    pub classes: usize,
    pub features: usize,
    pub data: Vec<Example>,
    pub epochs: u32,
    pub learning_rate: f64,
    pub mode: TrainMode,
    /// n_i / n, applied to FedSGD gradients so a plain sum is the pooled mean.
    pub gradient_scale: f64,
}

impl TrainerSource {
    pub fn from_config(cfg: &ExperimentConfig, party_id: &str) -> Result<Self> {
        let spec = cfg
            .synthetic_spec()
            .ok_or_else(|| Error::invalid("config has no trainer section"))?;
        let parties = cfg.ordered_parties()?;
        let index = cfg.party_index(party_id)?;
        let weight = parties[index].1;
        let total: u64 = parties.iter().map(|(_, w)| w).sum();
        Ok(Self {
            classes: spec.classes,
            features: spec.features,
            data: spec.party_data(index, weight as usize),
            epochs: cfg.local_epochs,
            learning_rate: cfg.learning_rate,
            mode: if cfg.algorithm.uploads_gradients() {
                TrainMode::FedSgd
            } else {
                TrainMode::FedAvg
            },
            gradient_scale: weight as f64 / total as f64,
        })
    }
}

impl UpdateSource for TrainerSource {
    fn initial_model(&self) -> Vec<f64> {
        DenseSoftmaxModel::zeros(self.classes, self.features).flatten()
    }

    fn update(&mut self, _round_id: u64, model: &[f64]) -> Result<Vec<f64>> {
        let m = DenseSoftmaxModel::from_flat(self.classes, self.features, model)?;
        match self.mode {
            TrainMode::FedSgd => {
                let mut g = gradient(&m, &self.data)?.into_inner();
                for v in &mut g {
                    *v *= self.gradient_scale;
                }
                Ok(g)
            }
            TrainMode::FedAvg => {
                Ok(local_train(&m, &self.data, self.epochs, self.learning_rate, TrainMode::FedAvg)?
                    .into_inner())
            }
        }
    }
}

/// Replays crafted updates; round r uses `updates[(r − 1) mod len]`.
pub struct FixedSource {
    pub initial: Vec<f64>,
    pub updates: Vec<Vec<f64>>,
}

impl UpdateSource for FixedSource {
    fn initial_model(&self) -> Vec<f64> {
        self.initial.clone()
    }

    fn update(&mut self, round_id: u64, _model: &[f64]) -> Result<Vec<f64>> {
        let i = ((round_id - 1) as usize) % self.updates.len();
        Ok(self.updates[i].clone())
    }
}

pub struct PartyOptions {
    pub record_history: bool,
    /// Overrides the secrets derived from the config (wrong-key trials).
    pub secrets: Option<PartySecrets>,
    pub paillier: Option<Arc<PaillierKeypair>>,
    pub connect_patience: Duration,
    /// Raised by a supervisor to stop waiting for aggregators to appear.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for PartyOptions {
    fn default() -> Self {
        Self {
            record_history: false,
            secrets: None,
            paillier: None,
            connect_patience: Duration::from_secs(30),
            cancel: None,
        }
    }
}

#[derive(Debug, Default)]
pub struct PartyOutcome {
    pub party_id: String,
    pub party_index: usize,
    pub final_model: Vec<f64>,
    /// Model after each round, when requested.
    pub history: Vec<Vec<f64>>,
    pub round_ids: Vec<u64>,
    /// Start-round to merged-model time per round.
    pub round_wall_ms: Vec<f64>,
}

pub fn model_checksum(model: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in model {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn secrets_from_config(cfg: &ExperimentConfig) -> Result<PartySecrets> {
    Ok(PartySecrets {
        mapper: build_mapper(cfg.model_size, &cfg.proportions, cfg.mapper_seed()?)?,
        permutation_key: if cfg.permute {
            Some(cfg.permutation_key()?)
        } else {
            None
        },
    })
}

struct Party<'a> {
    cfg: &'a ExperimentConfig,
    party_id: String,
    secrets: PartySecrets,
    fusion: FusionConfig,
    paillier: Option<Arc<PaillierKeypair>>,
    hub: Hub,
    /// Aggregator index → connection.
    agg_conns: Vec<ConnId>,
    theta: Vec<f64>,
    round_id: u64,
    round_started: Instant,
    fused: BTreeMap<usize, WireMessage>,
    merged_final: bool,
    outcome: PartyOutcome,
    record_history: bool,
}

pub fn run_party(
    cfg: &ExperimentConfig,
    net: &dyn Network,
    party_id: &str,
    source: &mut dyn UpdateSource,
    opts: PartyOptions,
) -> Result<PartyOutcome> {
    let parties = cfg.ordered_parties()?;
    let party_index = cfg.party_index(party_id)?;
    let weight = parties[party_index].1;
    let secrets = match opts.secrets {
        Some(s) => s,
        None => secrets_from_config(cfg)?,
    };
    if cfg.algorithm == FusionAlgorithm::Paillier && opts.paillier.is_none() {
        return Err(Error::invalid("paillier fusion needs the shared party keypair"));
    }
    let timeout = Duration::from_secs(cfg.round_timeout_secs);
    let mut hub = Hub::new(party_id.to_string(), cfg.max_frame_bytes);
    let a_count = cfg.num_aggregators();

    // Fetch published verification keys, waiting for aggregators still
    // being attested.
    let as_conn = hub.attach(connect_with_retry(net, &cfg.attestation_server, opts.connect_patience)?);
    let mut keys = Vec::with_capacity(a_count);
    let key_deadline = Instant::now() + opts.connect_patience;
    for a in 0..a_count {
        let agg_id = ExperimentConfig::agg_id(a);
        loop {
            hub.send(as_conn, &WireMessage::GetAggKey { agg_id: agg_id.clone() })?;
            match hub.next_from(as_conn, timeout)? {
                WireMessage::AggKey { key_b64: Some(k), .. } => {
                    keys.push(key_from_b64(&k)?);
                    break;
                }
                WireMessage::AggKey { key_b64: None, .. }
                    if Instant::now() < key_deadline
                        && !opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst)) =>
                {
                    std::thread::sleep(Duration::from_millis(25));
                }
                WireMessage::AggKey { .. } => return Err(Error::Rejected(RejectReason::Unknown)),
                other => return Err(Error::protocol(format!("expected agg_key, got {}", other.kind()))),
            }
        }
    }
    hub.close(as_conn);

    // Phase 2 and registration: followers first, the initiator last, so the
    // initiator never starts before every follower knows every party.
    let mut order: Vec<usize> = (0..a_count).filter(|&a| a != cfg.initiator).collect();
    order.push(cfg.initiator);
    let mut agg_conns = vec![usize::MAX; a_count];
    let mut book = ChallengeBook::new();
    for a in order {
        let agg_id = ExperimentConfig::agg_id(a);
        let conn = hub.attach(connect_with_retry(net, &cfg.aggregators[a], opts.connect_patience)?);
        let nonce = book.issue(&agg_id);
        hub.send(
            conn,
            &WireMessage::Challenge {
                agg_id: agg_id.clone(),
                nonce_b64: B64.encode(nonce),
            },
        )?;
        let (echoed, signature) = match hub.next_from(conn, timeout)? {
            WireMessage::ChallengeResp {
                agg_id: ref resp_id,
                nonce_b64,
                signature_b64,
            } if *resp_id == agg_id => (
                B64.decode(nonce_b64).ok().and_then(|v| <[u8; 32]>::try_from(v).ok()),
                B64.decode(signature_b64).unwrap_or_default(),
            ),
            other => return Err(Error::protocol(format!("expected challenge_resp, got {}", other.kind()))),
        };
        let echoed = echoed.ok_or(Error::Rejected(RejectReason::Malformed))?;
        book.verify_response(&agg_id, &echoed, &signature, Some(&keys[a]))?;
        debug!("{party_id}: {agg_id} authenticated");

        hub.send(
            conn,
            &WireMessage::Register {
                party_id: party_id.to_string(),
                weight,
                paillier_n: opts.paillier.as_ref().map(|k| k.public().modulus_decimal()),
            },
        )?;
        match hub.next_from(conn, timeout)? {
            WireMessage::RegisterAck {
                party_index: Some(i),
                ..
            } if i == party_index => {}
            WireMessage::RegisterAck { reject: Some(r), .. } => {
                return Err(Error::protocol(format!("{agg_id} rejected registration: {r}")))
            }
            other => {
                return Err(Error::protocol(format!(
                    "unexpected registration reply from {agg_id}: {other:?}"
                )))
            }
        }
        agg_conns[a] = conn;
    }
    info!("{party_id}: registered with {a_count} aggregators as index {party_index}");

    let mut node = Party {
        cfg,
        party_id: party_id.to_string(),
        secrets,
        fusion: cfg.fusion_config()?,
        paillier: opts.paillier,
        hub,
        agg_conns,
        theta: source.initial_model(),
        round_id: 0,
        round_started: Instant::now(),
        fused: BTreeMap::new(),
        merged_final: false,
        outcome: PartyOutcome {
            party_id: party_id.to_string(),
            party_index,
            ..Default::default()
        },
        record_history: opts.record_history,
    };
    if node.theta.len() != cfg.model_size {
        return Err(Error::invalid(format!(
            "initial model has {} values, model_size is {}",
            node.theta.len(),
            cfg.model_size
        )));
    }
    node.run(source, timeout)?;
    node.outcome.final_model = node.theta;
    Ok(node.outcome)
}

impl Party<'_> {
    fn initiator_conn(&self) -> ConnId {
        self.agg_conns[self.cfg.initiator]
    }

    fn run(&mut self, source: &mut dyn UpdateSource, timeout: Duration) -> Result<()> {
        let mut deadline = Instant::now() + timeout;
        loop {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout(format!(
                    "{}: no progress in round {} after {timeout:?}",
                    self.party_id, self.round_id
                )));
            }
            let Some(event) = self.hub.next(deadline - now)? else {
                continue;
            };
            let (conn, msg) = match event {
                Event::Message { conn, msg, .. } => (conn, msg),
                Event::Closed { conn, error } => {
                    // e.g. the attestation-server link we hung up on.
                    if !self.agg_conns.contains(&conn) {
                        continue;
                    }
                    let benign = error.is_none() && self.merged_final && conn != self.initiator_conn();
                    self.hub.close(conn);
                    if benign {
                        continue;
                    }
                    return Err(Error::PeerLost(match error {
                        Some(e) => format!("{}: aggregator link failed in round {}: {e}", self.party_id, self.round_id),
                        None => format!("{}: aggregator closed the connection in round {}", self.party_id, self.round_id),
                    }));
                }
                Event::Accepted { .. } => continue,
            };
            let from = self.agg_conns.iter().position(|&c| c == conn);
            match msg {
                WireMessage::StartRound { round_id } if conn == self.initiator_conn() => {
                    if round_id != self.round_id + 1 || !self.fused.is_empty() {
                        return Err(Error::protocol(format!(
                            "{}: start_round {round_id} while at round {}",
                            self.party_id, self.round_id
                        )));
                    }
                    self.round_id = round_id;
                    self.round_started = Instant::now();
                    deadline = self.round_started + timeout;
                    let update = source.update(round_id, &self.theta)?;
                    self.upload(round_id, &update)?;
                }
                WireMessage::Fused {
                    round_id, agg_index, ..
                } if Some(agg_index) == from => {
                    if round_id != self.round_id || self.fused.contains_key(&agg_index) {
                        return Err(Error::protocol(format!(
                            "{}: fused part for round {round_id} from agg-{agg_index} during round {}",
                            self.party_id, self.round_id
                        )));
                    }
                    self.fused.insert(agg_index, msg);
                    if self.fused.len() == self.agg_conns.len() {
                        self.complete_round()?;
                    }
                }
                WireMessage::TrainingComplete if conn == self.initiator_conn() => {
                    if !self.merged_final {
                        return Err(Error::protocol("training_complete before the final round"));
                    }
                    info!("{}: training complete after {} rounds", self.party_id, self.round_id);
                    return Ok(());
                }
                WireMessage::Abort { round_id, reason } => {
                    return Err(Error::Aborted { round_id, reason });
                }
                WireMessage::Error { reason } => {
                    return Err(Error::protocol(format!("aggregator reported: {reason}")));
                }
                other => {
                    return Err(Error::protocol(format!(
                        "{}: unexpected {} from aggregator {from:?}",
                        self.party_id,
                        other.kind()
                    )))
                }
            }
        }
    }

    fn upload(&mut self, round_id: u64, update: &[f64]) -> Result<()> {
        let parts = self.secrets.outbound(update, round_id)?;
        for (a, part) in parts.iter().enumerate() {
            let (payload_b64, ciphertexts_b64) = match &self.paillier {
                None => (Some(encode_f64_payload(part)), None),
                Some(kp) => (
                    None,
                    Some(encrypt_part(kp, part)?.iter().map(Ciphertext::to_b64).collect()),
                ),
            };
            self.hub.send(
                self.agg_conns[a],
                &WireMessage::Upload {
                    round_id,
                    party_id: self.party_id.clone(),
                    agg_index: a,
                    payload_b64,
                    ciphertexts_b64,
                },
            )?;
        }
        Ok(())
    }

    fn complete_round(&mut self) -> Result<()> {
        let round_id = self.round_id;
        let total: u64 = self.fusion.party_weights.iter().sum();
        let mut parts = Vec::with_capacity(self.agg_conns.len());
        for (_, msg) in std::mem::take(&mut self.fused) {
            let WireMessage::Fused {
                payload_b64,
                ciphertexts_b64,
                ..
            } = msg
            else {
                unreachable!()
            };
            let values = match (&self.paillier, payload_b64, ciphertexts_b64) {
                (None, Some(p), None) => decode_f64_payload(&p)?,
                (Some(kp), None, Some(cs)) => {
                    let cts = cs.iter().map(|c| Ciphertext::from_b64(c)).collect::<Result<Vec<_>>>()?;
                    decrypt_average(kp, total, &cts)?
                }
                _ => return Err(Error::protocol("fused payload does not match the fusion algorithm")),
            };
            parts.push(values);
        }
        let merged = self.secrets.inbound(&parts, round_id)?;
        apply_fused(&self.fusion, &mut self.theta, merged)?;

        self.outcome.round_ids.push(round_id);
        self.outcome
            .round_wall_ms
            .push(self.round_started.elapsed().as_secs_f64() * 1000.0);
        if self.record_history {
            self.outcome.history.push(self.theta.clone());
        }
        self.merged_final = round_id == self.cfg.rounds;
        self.hub.send(
            self.initiator_conn(),
            &WireMessage::RoundDone {
                round_id,
                node: self.party_id.clone(),
                checksum_hex: Some(model_checksum(&self.theta)),
            },
        )?;
        Ok(())
    }
}
