//! Networked runtime: attestation server, aggregators (one initiator, the
//! rest followers) and parties, over TCP or in-memory transports.

pub mod aggregator;
pub mod hub;
pub mod party;
pub mod pipeline;
pub mod server;
pub mod transport;
pub mod wire;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

pub use aggregator::{run_aggregator, AggregatorOptions, AggregatorOutcome, UploadRecord};
pub use party::{
    model_checksum, run_party, secrets_from_config, FixedSource, PartyOptions, PartyOutcome,
    TrainerSource, UpdateSource,
};
pub use pipeline::{centralized_round, decentralized_round, PartySecrets};
pub use server::{run_attestation_server, ServerOutcome};
pub use transport::{MemNetwork, Network, TcpNetwork};
pub use wire::{decode_message, encode_message, WireMessage};

use crate::config::{AggregatorLaunch, ExperimentConfig};
use crate::error::{Error, Result};
use crate::he::PaillierKeypair;

/// Knobs for a whole session run inside one process.
#[derive(Default)]
pub struct SessionOptions {
    pub record_trace: bool,
    pub record_history: bool,
    pub paillier: Option<Arc<PaillierKeypair>>,
    /// Per-party secret overrides, keyed by party id.
    pub party_secrets: HashMap<String, PartySecrets>,
    /// Per-aggregator launch overrides, keyed by index.
    pub launches: HashMap<usize, AggregatorLaunch>,
    pub connect_patience: Option<Duration>,
}

#[derive(Debug)]
pub struct SessionRun {
    pub server: ServerOutcome,
    pub aggregators: Vec<AggregatorOutcome>,
    /// In party-id order.
    pub parties: Vec<PartyOutcome>,
}

/// Runs every node of a session on its own thread over `net`. `sources` are
/// in party-id order. On failure, the first node error that is not a lost
/// peer is returned; lost peers are usually fallout from it.
pub fn run_session(
    cfg: &ExperimentConfig,
    net: &dyn Network,
    sources: Vec<Box<dyn UpdateSource>>,
    opts: SessionOptions,
) -> Result<SessionRun> {
    cfg.validate()?;
    let parties = cfg.ordered_parties()?;
    if sources.len() != parties.len() {
        return Err(Error::invalid(format!(
            "{} update sources for {} parties",
            sources.len(),
            parties.len()
        )));
    }
    let patience = opts.connect_patience.unwrap_or(Duration::from_secs(30));
    let stop = Arc::new(AtomicBool::new(false));
    // Node labels in the order they failed.
    let failures: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let fail = |label: &str| {
        failures.lock().expect("failure log").push(label.to_string());
        stop.store(true, Ordering::SeqCst);
    };

    thread::scope(|s| {
        let server = {
            let stop = stop.clone();
            thread::Builder::new()
                .name("attestation-server".into())
                .spawn_scoped(s, move || run_attestation_server(cfg, net, stop))
                .expect("spawn")
        };
        let aggs: Vec<_> = (0..cfg.num_aggregators())
            .map(|i| {
                let mut o = AggregatorOptions::new(i);
                o.record_trace = opts.record_trace;
                o.launch = opts.launches.get(&i).cloned();
                o.connect_patience = patience;
                let fail = &fail;
                thread::Builder::new()
                    .name(format!("agg-{i}"))
                    .spawn_scoped(s, move || {
                        let r = run_aggregator(cfg, net, o);
                        if r.is_err() {
                            fail(&ExperimentConfig::agg_id(i));
                        }
                        r
                    })
                    .expect("spawn")
            })
            .collect();
        let party_handles: Vec<_> = parties
            .iter()
            .zip(sources)
            .map(|((id, _), mut source)| {
                let o = PartyOptions {
                    record_history: opts.record_history,
                    secrets: opts.party_secrets.get(id).cloned(),
                    paillier: opts.paillier.clone(),
                    connect_patience: patience,
                    cancel: Some(stop.clone()),
                };
                let fail = &fail;
                thread::Builder::new()
                    .name(id.clone())
                    .spawn_scoped(s, move || {
                        let r = run_party(cfg, net, id, source.as_mut(), o);
                        if r.is_err() {
                            fail(id);
                        }
                        r
                    })
                    .expect("spawn")
            })
            .collect();

        let agg_results: Vec<Result<AggregatorOutcome>> =
            aggs.into_iter().map(|h| h.join().expect("aggregator thread")).collect();
        let party_results: Vec<Result<PartyOutcome>> = party_handles
            .into_iter()
            .map(|h| h.join().expect("party thread"))
            .collect();
        stop.store(true, Ordering::SeqCst);
        let server = server.join().expect("server thread");

        let mut errors: HashMap<String, Error> = HashMap::new();
        let mut agg_ok = Vec::new();
        for (i, r) in agg_results.into_iter().enumerate() {
            match r {
                Ok(o) => agg_ok.push(o),
                Err(e) => {
                    errors.insert(ExperimentConfig::agg_id(i), e);
                }
            }
        }
        let mut party_ok = Vec::new();
        for ((id, _), r) in parties.iter().zip(party_results) {
            match r {
                Ok(o) => party_ok.push(o),
                Err(e) => {
                    errors.insert(id.clone(), e);
                }
            }
        }
        let order = failures.lock().expect("failure log").clone();
        if let Some(label) = order
            .iter()
            .find(|l| errors.get(*l).is_some_and(|e| !e.is_knock_on()))
            .or(order.first())
        {
            return Err(errors.remove(label).expect("failed node has an error"));
        }
        Ok(SessionRun {
            server: server?,
            aggregators: agg_ok,
            parties: party_ok,
        })
    })
}
