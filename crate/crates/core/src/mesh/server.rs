//! The attestation server as a network service.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{info, warn};

use super::hub::{Event, Hub};
use super::transport::Network;
use super::wire::WireMessage;
use crate::attestation::{
    key_to_b64, measure, AttestationPolicy, AttestationServer, SimulatedManufacturer,
};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::he::SIGNATURE_SCHEME;

pub fn manufacturer(cfg: &ExperimentConfig) -> Result<SimulatedManufacturer> {
    Ok(SimulatedManufacturer::from_seed(&cfg.platform_seed()?))
}

/// Root key plus the expected measurement of every aggregator, computed from
/// the server's own copy of the configuration.
pub fn attestation_policy(cfg: &ExperimentConfig) -> Result<AttestationPolicy> {
    let mut expected = HashMap::new();
    for i in 0..cfg.num_aggregators() {
        expected.insert(
            ExperimentConfig::agg_id(i),
            measure(&cfg.aggregator_launch(i)?)?,
        );
    }
    Ok(AttestationPolicy {
        root_key: manufacturer(cfg)?.root_key(),
        expected_measurements: expected,
        min_api_version: cfg.platform.min_api_version.clone(),
    })
}

#[derive(Debug, Default)]
pub struct ServerOutcome {
    pub attested: Vec<String>,
    pub rejected: Vec<(String, String)>,
}

/// Serves until the initiator reports completion or `stop` is raised.
pub fn run_attestation_server(
    cfg: &ExperimentConfig,
    net: &dyn Network,
    stop: Arc<AtomicBool>,
) -> Result<ServerOutcome> {
    let mut server = AttestationServer::new(attestation_policy(cfg)?);
    let mut hub = Hub::new("attestation-server", cfg.max_frame_bytes);
    hub.serve(net.listen(&cfg.attestation_server)?);
    info!("attestation server listening on {}", cfg.attestation_server);
    let mut outcome = ServerOutcome::default();

    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(outcome);
        }
        let Some(event) = hub.next(Duration::from_millis(100))? else {
            continue;
        };
        let (conn, msg) = match event {
            Event::Message { conn, msg, .. } => (conn, msg),
            Event::Closed { conn, error: Some(e) } => {
                warn!("attestation server: conn {conn} failed: {e}");
                hub.close(conn);
                continue;
            }
            _ => continue,
        };
        match msg {
            WireMessage::AttestReport { report } => {
                let agg_id = report.agg_id.clone();
                match server.attest_platform(&report) {
                    Ok(blob) => {
                        info!("attested {agg_id}");
                        outcome.attested.push(agg_id.clone());
                        hub.send(
                            conn,
                            &WireMessage::AttestResult {
                                agg_id,
                                accepted: true,
                                reason: None,
                            },
                        )?;
                        hub.send(conn, &WireMessage::SecretBlob { blob })?;
                    }
                    Err(reason) => {
                        warn!("rejected {agg_id}: {reason}");
                        outcome.rejected.push((agg_id.clone(), reason.to_string()));
                        hub.send_quietly(
                            conn,
                            &WireMessage::AttestResult {
                                agg_id,
                                accepted: false,
                                reason: Some(reason),
                            },
                        );
                    }
                }
            }
            WireMessage::GetAggKey { agg_id } => {
                let key_b64 = server.lookup(&agg_id).map(|k| key_to_b64(&k));
                hub.send_quietly(
                    conn,
                    &WireMessage::AggKey {
                        agg_id,
                        scheme: SIGNATURE_SCHEME.into(),
                        key_b64,
                    },
                );
            }
            WireMessage::TrainingComplete => {
                info!("attestation server: training complete");
                return Ok(outcome);
            }
            WireMessage::Abort { round_id, reason } => {
                return Err(Error::Aborted { round_id, reason });
            }
            other => {
                hub.send_quietly(
                    conn,
                    &WireMessage::Error {
                        reason: format!("unexpected {} at attestation server", other.kind()),
                    },
                );
                hub.close(conn);
            }
        }
    }
}
