//! Aggregator node. Index `cfg.initiator` drives rounds; the others follow.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use log::{debug, info, warn};
use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

use super::hub::{ConnId, Event, Hub};
use super::pipeline::{aggregator_fuse, aggregator_fuse_encrypted};
use super::server::manufacturer;
use super::transport::{connect_with_retry, Network};
use super::wire::WireMessage;
use crate::attestation::{inject_secret, measure, AggregatorCredential, RejectReason};
use crate::config::{AggregatorLaunch, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionAlgorithm, FusionConfig};
use crate::he::{Ciphertext, PaillierPublicKey};
use crate::tensor::{decode_f64_payload, encode_f64_payload, exact_counts};

#[derive(Clone, Debug)]
pub struct AggregatorOptions {
    pub index: usize,
    /// Keep every upload frame exactly as received.
    pub record_trace: bool,
    /// Launch configuration presented for measurement. Defaults to the one
    /// derived from the session config; overriding it models a tampered
    /// image.
    pub launch: Option<AggregatorLaunch>,
    pub connect_patience: Duration,
}

impl AggregatorOptions {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            record_trace: false,
            launch: None,
            connect_patience: Duration::from_secs(30),
        }
    }
}

/// An upload frame as one aggregator saw it on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UploadRecord {
    pub round_id: u64,
    pub agg_index: usize,
    pub party_id: String,
    pub frame_b64: String,
}

#[derive(Debug, Default)]
pub struct AggregatorOutcome {
    pub agg_id: String,
    pub registered: Vec<String>,
    pub round_ids: Vec<u64>,
    /// Initiator only: wall time of each round, start to last round_done.
    pub round_wall_ms: Vec<f64>,
    /// Largest number of values received in any single upload.
    pub max_upload_values: usize,
    pub uploads: Vec<UploadRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Peer {
    Party(usize),
    Follower(usize),
    Initiator,
    AttestationServer,
}

enum Body {
    Plain(Vec<f64>),
    Cipher(Vec<Ciphertext>),
}

struct Round {
    id: u64,
    started: Instant,
    uploads: BTreeMap<usize, Body>,
    fused: bool,
    followers_done: HashSet<usize>,
    party_checksums: BTreeMap<usize, String>,
}

impl Round {
    fn new(id: u64) -> Self {
        Self {
            id,
            started: Instant::now(),
            uploads: BTreeMap::new(),
            fused: false,
            followers_done: HashSet::new(),
            party_checksums: BTreeMap::new(),
        }
    }
}

enum Flow {
    Continue,
    Finished,
}

struct Aggregator {
    launch: AggregatorLaunch,
    agg_id: String,
    credential: AggregatorCredential,
    fusion: FusionConfig,
    my_count: usize,
    is_initiator: bool,
    timeout: Duration,
    hub: Hub,
    peers: HashMap<ConnId, Peer>,
    party_conns: BTreeMap<usize, ConnId>,
    follower_conns: BTreeMap<usize, ConnId>,
    initiator_conn: Option<ConnId>,
    as_conn: Option<ConnId>,
    paillier: Option<PaillierPublicKey>,
    started: bool,
    round: Option<Round>,
    /// Follower: uploads that raced ahead of the initiator's round_open.
    early: Vec<(ConnId, WireMessage, Vec<u8>)>,
    record_trace: bool,
    outcome: AggregatorOutcome,
}

fn abort_err(round_id: u64, reason: impl Into<String>) -> Error {
    Error::Aborted {
        round_id,
        reason: reason.into(),
    }
}

pub fn run_aggregator(
    cfg: &ExperimentConfig,
    net: &dyn Network,
    opts: AggregatorOptions,
) -> Result<AggregatorOutcome> {
    let index = opts.index;
    let launch = match opts.launch.clone() {
        Some(l) => l,
        None => cfg.aggregator_launch(index)?,
    };
    let agg_id = ExperimentConfig::agg_id(index);
    let mut hub = Hub::new(agg_id.clone(), launch.max_frame_bytes);
    let timeout = Duration::from_secs(launch.round_timeout_secs);

    // Bind first so parties can connect as soon as we are attested.
    hub.serve(net.listen(&cfg.aggregators[index])?);

    // Phase 1: attest and receive the signing key.
    let platform = manufacturer(cfg)?.issue_platform(
        &agg_id,
        &cfg.platform.api_version,
        cfg.platform.policy,
    );
    let report = platform.report(&agg_id, measure(&launch)?);
    let as_conn = hub.attach(connect_with_retry(
        net,
        &cfg.attestation_server,
        opts.connect_patience,
    )?);
    hub.send(as_conn, &WireMessage::AttestReport { report })?;
    match hub.next_from(as_conn, timeout)? {
        WireMessage::AttestResult { accepted: true, .. } => {}
        WireMessage::AttestResult { reason, .. } => {
            return Err(Error::Rejected(reason.unwrap_or(RejectReason::Unknown)));
        }
        other => return Err(Error::protocol(format!("expected attest_result, got {}", other.kind()))),
    }
    let credential = match hub.next_from(as_conn, timeout)? {
        WireMessage::SecretBlob { blob } => inject_secret(&blob, &platform)?,
        other => return Err(Error::protocol(format!("expected secret_blob, got {}", other.kind()))),
    };
    info!("{agg_id}: attested, signing key injected");

    let is_initiator = index == launch.initiator;
    let mut peers = HashMap::new();
    let mut initiator_conn = None;
    let kept_as_conn = if is_initiator {
        peers.insert(as_conn, Peer::AttestationServer);
        Some(as_conn)
    } else {
        hub.close(as_conn);
        let conn = hub.attach(connect_with_retry(
            net,
            &launch.aggregators[launch.initiator],
            opts.connect_patience,
        )?);
        hub.send(conn, &WireMessage::PeerHello { agg_index: index })?;
        peers.insert(conn, Peer::Initiator);
        initiator_conn = Some(conn);
        None
    };

    let fusion = FusionConfig {
        algorithm: launch.algorithm,
        party_weights: launch.parties.iter().map(|(_, w)| *w).collect(),
        byzantine_f: launch.byzantine_f,
        learning_rate: cfg.learning_rate,
    };
    let my_count = exact_counts(launch.model_size, &launch.proportions)[index];
    let mut node = Aggregator {
        agg_id: agg_id.clone(),
        credential,
        fusion,
        my_count,
        is_initiator,
        timeout,
        hub,
        peers,
        party_conns: BTreeMap::new(),
        follower_conns: BTreeMap::new(),
        initiator_conn,
        as_conn: kept_as_conn,
        paillier: None,
        started: false,
        round: None,
        early: Vec::new(),
        record_trace: opts.record_trace,
        outcome: AggregatorOutcome {
            agg_id,
            ..Default::default()
        },
        launch,
    };
    match node.run() {
        Ok(()) => {
            node.outcome.registered = node
                .party_conns
                .keys()
                .map(|&i| node.launch.parties[i].0.clone())
                .collect();
            Ok(node.outcome)
        }
        Err(e) => {
            node.abort_all(&e);
            Err(e)
        }
    }
}

impl Aggregator {
    fn round_id(&self) -> u64 {
        self.round.as_ref().map(|r| r.id).unwrap_or(0)
    }

    fn run(&mut self) -> Result<()> {
        let setup_deadline = Instant::now() + self.timeout;
        loop {
            let deadline = match &self.round {
                Some(r) => r.started + self.timeout,
                None => setup_deadline,
            };
            let now = Instant::now();
            if now >= deadline {
                return Err(abort_err(
                    self.round_id(),
                    format!("{}: timed out after {:?}", self.agg_id, self.timeout),
                ));
            }
            let Some(event) = self.hub.next(deadline - now)? else {
                continue;
            };
            match event {
                Event::Message { conn, msg, raw } => {
                    if let Flow::Finished = self.on_message(conn, msg, raw)? {
                        return Ok(());
                    }
                }
                Event::Closed { conn, error } => self.on_closed(conn, error)?,
                Event::Accepted { .. } => {}
            }
        }
    }

    fn last_round_fused(&self) -> bool {
        self.round
            .as_ref()
            .map(|r| r.id == self.launch.rounds && r.fused)
            .unwrap_or(false)
    }

    fn on_closed(&mut self, conn: ConnId, error: Option<Error>) -> Result<()> {
        let peer = self.peers.get(&conn).copied();
        self.hub.close(conn);
        match (peer, error) {
            (None, Some(e)) => {
                debug!("{}: unregistered conn {conn} failed: {e}", self.agg_id);
                Ok(())
            }
            (None, None) => Ok(()),
            (Some(Peer::Party(_)), None) if self.last_round_fused() => Ok(()),
            (Some(p), e) => Err(Error::PeerLost(match e {
                Some(e) => format!("{}: {p:?} connection failed in round {}: {e}", self.agg_id, self.round_id()),
                None => format!("{}: {p:?} disconnected in round {}", self.agg_id, self.round_id()),
            })),
        }
    }

    fn reject_conn(&mut self, conn: ConnId, reason: String) -> Result<Flow> {
        self.hub
            .send_quietly(conn, &WireMessage::Error { reason: reason.clone() });
        self.hub.close(conn);
        Err(Error::protocol(format!("{}: {reason}", self.agg_id)))
    }

    fn on_message(&mut self, conn: ConnId, msg: WireMessage, raw: Vec<u8>) -> Result<Flow> {
        let peer = self.peers.get(&conn).copied();
        match msg {
            WireMessage::Challenge { agg_id, nonce_b64 } => {
                if agg_id != self.agg_id {
                    return self.reject_conn(conn, format!("challenge addressed to {agg_id}"));
                }
                let nonce: [u8; 32] = match B64.decode(&nonce_b64).ok().and_then(|v| v.try_into().ok()) {
                    Some(n) => n,
                    None => return self.reject_conn(conn, "challenge nonce must be 32 bytes".into()),
                };
                let signature = crate::attestation::respond(&self.credential, &nonce);
                self.hub.send(
                    conn,
                    &WireMessage::ChallengeResp {
                        agg_id,
                        nonce_b64,
                        signature_b64: B64.encode(signature),
                    },
                )?;
                Ok(Flow::Continue)
            }
            WireMessage::Register {
                party_id,
                weight,
                paillier_n,
            } => self.on_register(conn, party_id, weight, paillier_n),
            WireMessage::PeerHello { agg_index } if self.is_initiator => {
                if agg_index == self.launch.index
                    || agg_index >= self.launch.aggregators.len()
                    || self.follower_conns.contains_key(&agg_index)
                {
                    return self.reject_conn(conn, format!("bad peer_hello from {agg_index}"));
                }
                self.peers.insert(conn, Peer::Follower(agg_index));
                self.follower_conns.insert(agg_index, conn);
                self.maybe_start()
            }
            WireMessage::RoundOpen { round_id } if peer == Some(Peer::Initiator) => {
                if round_id != self.round_id() + 1 || (self.round.is_some() && !self.round.as_ref().unwrap().fused) {
                    return Err(Error::protocol(format!(
                        "{}: round_open {round_id} while at round {}",
                        self.agg_id,
                        self.round_id()
                    )));
                }
                self.started = true;
                self.round = Some(Round::new(round_id));
                for (c, m, r) in std::mem::take(&mut self.early) {
                    self.on_message(c, m, r)?;
                }
                Ok(Flow::Continue)
            }
            WireMessage::Upload { .. } => self.on_upload(conn, peer, msg, raw),
            WireMessage::RoundDone {
                round_id,
                node,
                checksum_hex,
            } if self.is_initiator => self.on_round_done(peer, round_id, node, checksum_hex),
            WireMessage::TrainingComplete if peer == Some(Peer::Initiator) => {
                if !self.last_round_fused() {
                    return Err(Error::protocol("training_complete before the final round"));
                }
                info!("{}: training complete", self.agg_id);
                Ok(Flow::Finished)
            }
            WireMessage::Abort { round_id, reason } if peer.is_some() => {
                Err(abort_err(round_id, reason))
            }
            WireMessage::Error { reason } => Err(abort_err(
                self.round_id(),
                format!("{}: peer {peer:?} reported error: {reason}", self.agg_id),
            )),
            other => {
                let reason = format!("unexpected {} from {peer:?}", other.kind());
                if peer.is_some() {
                    return Err(Error::protocol(format!("{}: {reason}", self.agg_id)));
                }
                self.reject_conn(conn, reason)
            }
        }
    }

    fn on_register(
        &mut self,
        conn: ConnId,
        party_id: String,
        weight: u64,
        paillier_n: Option<String>,
    ) -> Result<Flow> {
        let ack_reject = |hub: &mut Hub, reason: &str| {
            warn!("{}: rejecting registration of {party_id}: {reason}", hub.name());
            hub.send_quietly(
                conn,
                &WireMessage::RegisterAck {
                    party_id: party_id.clone(),
                    party_index: None,
                    reject: Some(reason.to_string()),
                },
            );
            Ok(Flow::Continue)
        };
        let Some(index) = self.launch.parties.iter().position(|(id, _)| *id == party_id) else {
            return ack_reject(&mut self.hub, "unknown party");
        };
        if self.started {
            return ack_reject(&mut self.hub, "late");
        }
        if self.launch.parties[index].1 != weight {
            return ack_reject(&mut self.hub, "weight mismatch");
        }
        if self.launch.algorithm == FusionAlgorithm::Paillier {
            let Some(n) = paillier_n.as_deref().and_then(|s| s.parse::<BigUint>().ok()) else {
                return ack_reject(&mut self.hub, "paillier modulus required");
            };
            match &self.paillier {
                Some(pk) if *pk.n() != n => return ack_reject(&mut self.hub, "paillier modulus mismatch"),
                Some(_) => {}
                None => self.paillier = Some(PaillierPublicKey::from_modulus(n)?),
            }
        }
        if let Some(old) = self.party_conns.insert(index, conn) {
            if old != conn {
                self.peers.remove(&old);
                self.hub.close(old);
            }
        }
        self.peers.insert(conn, Peer::Party(index));
        self.hub.send(
            conn,
            &WireMessage::RegisterAck {
                party_id,
                party_index: Some(index),
                reject: None,
            },
        )?;
        self.maybe_start()
    }

    fn maybe_start(&mut self) -> Result<Flow> {
        if self.is_initiator
            && !self.started
            && self.party_conns.len() == self.launch.parties.len()
            && self.follower_conns.len() + 1 == self.launch.aggregators.len()
        {
            self.started = true;
            info!(
                "{}: {} parties and {} followers ready, starting",
                self.agg_id,
                self.party_conns.len(),
                self.follower_conns.len()
            );
            self.start_round(1)?;
        }
        Ok(Flow::Continue)
    }

    fn start_round(&mut self, round_id: u64) -> Result<()> {
        self.round = Some(Round::new(round_id));
        let followers: Vec<ConnId> = self.follower_conns.values().copied().collect();
        for c in followers {
            self.hub.send(c, &WireMessage::RoundOpen { round_id })?;
        }
        let parties: Vec<ConnId> = self.party_conns.values().copied().collect();
        for c in parties {
            self.hub.send(c, &WireMessage::StartRound { round_id })?;
        }
        debug!("{}: round {round_id} started", self.agg_id);
        Ok(())
    }

    fn on_upload(&mut self, conn: ConnId, peer: Option<Peer>, msg: WireMessage, raw: Vec<u8>) -> Result<Flow> {
        let WireMessage::Upload {
            round_id,
            ref party_id,
            agg_index,
            ref payload_b64,
            ref ciphertexts_b64,
        } = msg
        else {
            unreachable!()
        };
        let Some(Peer::Party(index)) = peer else {
            return self.reject_conn(conn, "upload from unregistered connection".into());
        };
        if self.launch.parties[index].0 != *party_id {
            return self.reject_conn(conn, format!("upload names {party_id} on another party's connection"));
        }
        if agg_index != self.launch.index {
            return self.reject_conn(conn, format!("upload for aggregator {agg_index} sent to {}", self.agg_id));
        }
        let current = self.round_id();
        let open = self.round.as_ref().map(|r| !r.fused).unwrap_or(false);
        if !self.is_initiator && round_id == current + 1 && (!open) {
            // The party saw start_round before we saw round_open.
            self.early.push((conn, msg, raw));
            return Ok(Flow::Continue);
        }
        if round_id != current || !open {
            return self.reject_conn(conn, format!("upload for round {round_id} during round {current}"));
        }
        if self.round.as_ref().unwrap().uploads.contains_key(&index) {
            return self.reject_conn(conn, format!("duplicate upload from {party_id} in round {round_id}"));
        }
        let body = match (&self.paillier, payload_b64, ciphertexts_b64) {
            (None, Some(p), None) => match decode_f64_payload(p) {
                Ok(v) => Body::Plain(v),
                Err(e) => return self.reject_conn(conn, format!("bad payload: {e}")),
            },
            (Some(pk), None, Some(cs)) => {
                match cs.iter().map(|c| {
                    let c = Ciphertext::from_b64(c)?;
                    pk.check_ciphertext(&c)?;
                    Ok(c)
                }).collect::<Result<Vec<_>>>() {
                    Ok(v) => Body::Cipher(v),
                    Err(e) => return self.reject_conn(conn, format!("bad ciphertexts: {e}")),
                }
            }
            _ => return self.reject_conn(conn, "upload payload does not match the fusion algorithm".into()),
        };
        let len = match &body {
            Body::Plain(v) => v.len(),
            Body::Cipher(v) => v.len(),
        };
        if len != self.my_count {
            return self.reject_conn(conn, format!("upload carries {len} values, partition has {}", self.my_count));
        }
        self.outcome.max_upload_values = self.outcome.max_upload_values.max(len);
        if self.record_trace {
            self.outcome.uploads.push(UploadRecord {
                round_id,
                agg_index,
                party_id: party_id.clone(),
                frame_b64: B64.encode(&raw),
            });
        }
        let round = self.round.as_mut().unwrap();
        round.uploads.insert(index, body);
        if round.uploads.len() == self.launch.parties.len() {
            self.fuse_and_deliver()?;
        }
        Ok(Flow::Continue)
    }

    fn fuse_and_deliver(&mut self) -> Result<()> {
        let round = self.round.as_mut().unwrap();
        let round_id = round.id;
        let uploads = std::mem::take(&mut round.uploads);
        round.fused = true;
        let agg_index = self.launch.index;
        let fused = match &self.paillier {
            None => {
                let plain: Vec<Vec<f64>> = uploads
                    .into_values()
                    .map(|b| match b {
                        Body::Plain(v) => v,
                        Body::Cipher(_) => unreachable!(),
                    })
                    .collect();
                let out = aggregator_fuse(&self.fusion, &plain)?;
                WireMessage::Fused {
                    round_id,
                    agg_index,
                    payload_b64: Some(encode_f64_payload(&out)),
                    ciphertexts_b64: None,
                }
            }
            Some(pk) => {
                let cts: Vec<Vec<Ciphertext>> = uploads
                    .into_values()
                    .map(|b| match b {
                        Body::Cipher(v) => v,
                        Body::Plain(_) => unreachable!(),
                    })
                    .collect();
                let out = aggregator_fuse_encrypted(pk, &self.fusion.party_weights, &cts)?;
                WireMessage::Fused {
                    round_id,
                    agg_index,
                    payload_b64: None,
                    ciphertexts_b64: Some(out.iter().map(Ciphertext::to_b64).collect()),
                }
            }
        };
        let parties: Vec<ConnId> = self.party_conns.values().copied().collect();
        for c in parties {
            self.hub.send(c, &fused)?;
        }
        self.outcome.round_ids.push(round_id);
        debug!("{}: round {round_id} fused", self.agg_id);
        if let Some(c) = self.initiator_conn {
            self.hub.send(
                c,
                &WireMessage::RoundDone {
                    round_id,
                    node: self.agg_id.clone(),
                    checksum_hex: None,
                },
            )?;
        }
        Ok(())
    }

    fn on_round_done(
        &mut self,
        peer: Option<Peer>,
        round_id: u64,
        node: String,
        checksum_hex: Option<String>,
    ) -> Result<Flow> {
        let current = self.round_id();
        if round_id != current {
            return Err(Error::protocol(format!(
                "round_done for {round_id} from {node} during round {current}"
            )));
        }
        let round = self.round.as_mut().unwrap();
        match peer {
            Some(Peer::Follower(i)) => {
                round.followers_done.insert(i);
            }
            Some(Peer::Party(i)) => {
                let Some(sum) = checksum_hex else {
                    return Err(Error::protocol(format!("round_done from {node} without checksum")));
                };
                round.party_checksums.insert(i, sum);
            }
            _ => return Err(Error::protocol(format!("round_done from unexpected peer {node}"))),
        }
        if !(round.fused
            && round.followers_done.len() == self.follower_conns.len()
            && round.party_checksums.len() == self.party_conns.len())
        {
            return Ok(Flow::Continue);
        }

        let mut sums = round.party_checksums.values();
        let first = sums.next().cloned().unwrap_or_default();
        if sums.any(|s| *s != first) {
            return Err(abort_err(round_id, "party models diverged (checksum mismatch)"));
        }
        let elapsed = round.started.elapsed().as_secs_f64() * 1000.0;
        self.outcome.round_wall_ms.push(elapsed);
        info!("{}: round {round_id} complete in {elapsed:.1} ms", self.agg_id);

        if round_id == self.launch.rounds {
            let mut conns: Vec<ConnId> = self.party_conns.values().copied().collect();
            conns.extend(self.follower_conns.values().copied());
            conns.extend(self.as_conn);
            for c in conns {
                self.hub.send_quietly(c, &WireMessage::TrainingComplete);
            }
            return Ok(Flow::Finished);
        }
        self.start_round(round_id + 1)?;
        Ok(Flow::Continue)
    }

    /// Tells every known peer the session is over.
    fn abort_all(&mut self, error: &Error) {
        let (round_id, reason) = match error {
            Error::Aborted { round_id, reason } => (*round_id, reason.clone()),
            e => (self.round_id(), format!("{}: {e}", self.agg_id)),
        };
        warn!("{}: aborting session: {reason}", self.agg_id);
        let msg = WireMessage::Abort { round_id, reason };
        for c in self.hub.connections() {
            self.hub.send_quietly(c, &msg);
        }
    }
}
