mod common;

use std::collections::HashMap;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use common::Setup;
use splitagg::attestation::{inject_secret, RejectReason};
use splitagg::config::ExperimentConfig;
use splitagg::experiment::{simulate, SimulateOptions};
use splitagg::mesh::server::manufacturer;
use splitagg::mesh::transport::Network;
use splitagg::mesh::wire::{read_frame, write_frame};
use splitagg::mesh::{
    run_aggregator, run_attestation_server, run_session, secrets_from_config,
    AggregatorOptions, FixedSource, MemNetwork, PartySecrets, SessionOptions, UpdateSource, WireMessage,
};
use splitagg::Error;

fn fixed(initial: Vec<f64>, updates: &[Vec<Vec<f64>>]) -> Vec<Box<dyn UpdateSource>> {
    updates
        .iter()
        .map(|u| {
            Box::new(FixedSource {
                initial: initial.clone(),
                updates: u.clone(),
            }) as Box<dyn UpdateSource>
        })
        .collect()
}

#[test]
fn hand_sum_through_two_aggregators() {
    let cfg = Setup {
        algorithm: "gradient_sum",
        learning_rate: 1.0,
        ..Default::default()
    }
    .build();
    let sources = fixed(
        vec![0.0; 4],
        &[vec![vec![1.0, 2.0, 3.0, 4.0]], vec![vec![3.0, 4.0, 5.0, 6.0]]],
    );
    let run = run_session(&cfg, &MemNetwork::new(), sources, SessionOptions::default()).unwrap();
    for p in &run.parties {
        assert_eq!(p.final_model, vec![-4.0, -6.0, -8.0, -10.0]);
        assert_eq!(p.round_ids, vec![1]);
    }
    assert_eq!(run.server.attested.len(), 2);
    for a in &run.aggregators {
        assert_eq!(a.registered, vec!["party-0", "party-1"]);
        assert_eq!(a.max_upload_values, 2);
    }
}

#[test]
fn simulate_gradient_sum_tracks_reference_exactly() {
    let cfg = Setup {
        parties: 3,
        proportions: &[0.5, 0.3, 0.2],
        algorithm: "gradient_sum",
        rounds: 30,
        trainer: Some((3, 4, 20)),
        ..Default::default()
    }
    .build();
    let r = simulate(&cfg, SimulateOptions::default()).unwrap();
    assert_eq!(r.records.len(), 30);
    for rec in &r.records {
        assert_eq!(rec.oracle_max_deviation, 0.0, "round {}", rec.round_id);
        assert!(rec.loss.is_finite());
    }
    assert!(r.records[29].loss < r.records[0].loss);
}

#[test]
fn simulate_coordinate_median_tracks_reference_exactly() {
    let cfg = Setup {
        parties: 4,
        proportions: &[0.25, 0.25, 0.5],
        algorithm: "coordinate_median",
        rounds: 5,
        trainer: Some((3, 5, 10)),
        ..Default::default()
    }
    .build();
    let r = simulate(&cfg, SimulateOptions::default()).unwrap();
    assert!(r.records.iter().all(|rec| rec.oracle_max_deviation == 0.0));
}

#[test]
fn simulate_paillier_within_quantization_bound() {
    let cfg = Setup {
        parties: 3,
        proportions: &[0.4, 0.6],
        algorithm: "paillier",
        rounds: 3,
        trainer: Some((2, 3, 8)),
        ..Default::default()
    }
    .build();
    let r = simulate(&cfg, SimulateOptions::default()).unwrap();
    let bound = 4.0 * 2f64.powi(-40);
    for rec in &r.records {
        assert!(rec.oracle_max_deviation <= bound, "{}", rec.oracle_max_deviation);
    }
}

#[test]
fn wrong_permutation_key_is_caught_by_checksums() {
    let cfg = Setup {
        parties: 3,
        rounds: 2,
        ..Default::default()
    }
    .build();
    let good = secrets_from_config(&cfg).unwrap();
    let bad = PartySecrets {
        mapper: good.mapper.clone(),
        permutation_key: Some([0x99; 32]),
    };
    let sources = fixed(
        vec![0.0; 4],
        &[
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![vec![5.0, 6.0, 7.0, 8.0]],
            vec![vec![9.0, 1.0, 2.0, 3.0]],
        ],
    );
    let opts = SessionOptions {
        party_secrets: HashMap::from([("party-2".to_string(), bad)]),
        ..Default::default()
    };
    match run_session(&cfg, &MemNetwork::new(), sources, opts) {
        Err(Error::Aborted { round_id, reason }) => {
            assert_eq!(round_id, 1);
            assert!(reason.contains("checksum"), "{reason}");
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn tampered_launch_is_rejected_at_attestation() {
    let cfg = Setup::default().build();
    let mut tampered = cfg.aggregator_launch(1).unwrap();
    tampered.rounds += 1;
    let opts = SessionOptions {
        launches: HashMap::from([(1, tampered)]),
        connect_patience: Some(Duration::from_secs(2)),
        ..Default::default()
    };
    let sources = fixed(vec![0.0; 4], &[vec![vec![0.0; 4]], vec![vec![0.0; 4]]]);
    let err = run_session(&cfg, &MemNetwork::new(), sources, opts).unwrap_err();
    let all = format!("{err:?}");
    assert!(
        matches!(err, Error::Rejected(RejectReason::Measurement)) || all.contains("Measurement") || all.contains("agg-1"),
        "{all}"
    );
}

fn send(w: &mut dyn std::io::Write, msg: &WireMessage) {
    write_frame(w, msg).unwrap();
}

fn recv(r: &mut dyn std::io::Read) -> WireMessage {
    let frame = read_frame(r, 1 << 20).unwrap().expect("frame");
    splitagg::mesh::wire::decode_body(&frame).unwrap()
}

/// One aggregator driven by a scripted party.
#[test]
fn registration_and_round_rules() {
    let cfg = Setup {
        parties: 1,
        proportions: &[1.0],
        ..Default::default()
    }
    .build();
    let net = MemNetwork::new();
    let stop = Arc::new(AtomicBool::new(false));
    thread::scope(|s| {
        let server = s.spawn(|| run_attestation_server(&cfg, &net, stop.clone()));
        let agg = s.spawn(|| run_aggregator(&cfg, &net, AggregatorOptions::new(0)));

        let connect = || {
            splitagg::mesh::transport::connect_with_retry(&net, &cfg.aggregators[0], Duration::from_secs(5))
                .unwrap()
        };
        // Wait until attested: the aggregator binds before attesting, so
        // poll the server for its key.
        let mut as_link = splitagg::mesh::transport::connect_with_retry(
            &net,
            &cfg.attestation_server,
            Duration::from_secs(5),
        )
        .unwrap();
        loop {
            send(&mut as_link.writer, &WireMessage::GetAggKey { agg_id: "agg-0".into() });
            if let WireMessage::AggKey { key_b64: Some(_), .. } = recv(&mut as_link.reader) {
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }

        let mut stranger = connect();
        send(
            &mut stranger.writer,
            &WireMessage::Register {
                party_id: "mallory".into(),
                weight: 1,
                paillier_n: None,
            },
        );
        match recv(&mut stranger.reader) {
            WireMessage::RegisterAck { party_index: None, reject: Some(r), .. } => assert_eq!(r, "unknown party"),
            other => panic!("{other:?}"),
        }

        let mut party = connect();
        send(
            &mut party.writer,
            &WireMessage::Register {
                party_id: "party-0".into(),
                weight: 1,
                paillier_n: None,
            },
        );
        assert!(matches!(
            recv(&mut party.reader),
            WireMessage::RegisterAck { party_index: Some(0), .. }
        ));
        assert_eq!(recv(&mut party.reader), WireMessage::StartRound { round_id: 1 });

        let mut late = connect();
        send(
            &mut late.writer,
            &WireMessage::Register {
                party_id: "party-0".into(),
                weight: 1,
                paillier_n: None,
            },
        );
        match recv(&mut late.reader) {
            WireMessage::RegisterAck { reject: Some(r), .. } => assert_eq!(r, "late"),
            other => panic!("{other:?}"),
        }

        send(
            &mut party.writer,
            &WireMessage::Upload {
                round_id: 2,
                party_id: "party-0".into(),
                agg_index: 0,
                payload_b64: Some(splitagg::tensor::encode_f64_payload(&[0.0; 4])),
                ciphertexts_b64: None,
            },
        );
        assert!(matches!(recv(&mut party.reader), WireMessage::Error { .. }));
        let err = agg.join().unwrap().unwrap_err();
        assert!(err.to_string().contains("round 2"), "{err}");
        stop.store(true, std::sync::atomic::Ordering::SeqCst);
        // The aggregator forwards its abort to the server.
        assert!(matches!(server.join().unwrap(), Err(Error::Aborted { round_id: 1, .. })));
    });
}

#[test]
fn signing_keys_never_cross_the_wire_and_trace_matches_capture() {
    let cfg = Setup {
        parties: 2,
        proportions: &[0.6, 0.2, 0.2],
        rounds: 2,
        model_size: 10,
        ..Default::default()
    }
    .build();
    let (net, cap) = MemNetwork::with_capture();
    let sources = fixed(
        vec![0.0; 10],
        &[vec![(0..10).map(f64::from).collect()], vec![vec![0.5; 10]]],
    );
    let run = run_session(
        &cfg,
        &net,
        sources,
        SessionOptions {
            record_trace: true,
            ..Default::default()
        },
    )
    .unwrap();
    let frames = cap.lock().unwrap().clone();

    let mut streams: HashMap<String, Vec<u8>> = HashMap::new();
    for (label, bytes) in &frames {
        streams.entry(label.clone()).or_default().extend_from_slice(bytes);
    }
    let everything: Vec<u8> = frames.iter().flat_map(|(_, b)| b.clone()).collect();
    let contains = |hay: &[u8], needle: &[u8]| hay.windows(needle.len()).any(|w| w == needle);

    // Recover each injected key with the platform's own identity, then make
    // sure neither its raw nor its base64 form was ever written.
    let m = manufacturer(&cfg).unwrap();
    let as_stream = &streams[&format!("reply:{}", cfg.attestation_server)];
    let mut cursor: &[u8] = as_stream;
    let mut recovered = 0;
    while let Some(frame) = read_frame(&mut cursor, usize::MAX).unwrap() {
        if let WireMessage::SecretBlob { blob } = splitagg::mesh::wire::decode_body(&frame).unwrap() {
            let platform = m.issue_platform(&blob.agg_id, &cfg.platform.api_version, cfg.platform.policy);
            let secret = inject_secret(&blob, &platform).unwrap().secret_bytes_for_audit();
            assert!(!contains(&everything, &secret));
            assert!(!contains(&everything, B64.encode(&secret).as_bytes()));
            let other = m.issue_platform("agg-other", &cfg.platform.api_version, cfg.platform.policy);
            assert!(inject_secret(&blob, &other).is_err());
            recovered += 1;
        }
    }
    assert_eq!(recovered, 3);

    // Every recorded upload is byte-identical to what reached that aggregator.
    let mut checked = 0;
    for a in &run.aggregators {
        let idx: usize = a.agg_id.trim_start_matches("agg-").parse().unwrap();
        let stream = &streams[&cfg.aggregators[idx]];
        for u in &a.uploads {
            assert_eq!(u.agg_index, idx);
            let body = B64.decode(&u.frame_b64).unwrap();
            let mut framed = (body.len() as u32).to_be_bytes().to_vec();
            framed.extend_from_slice(&body);
            assert!(contains(stream, &framed));
            checked += 1;
        }
    }
    assert_eq!(checked, 2 * 2 * 3);
}

#[test]
fn tcp_session_matches_in_memory() {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut cfg = Setup {
        parties: 2,
        proportions: &[0.5, 0.5],
        algorithm: "weighted_average",
        rounds: 3,
        trainer: Some((2, 3, 6)),
        ..Default::default()
    }
    .build();
    let ports: Vec<u16> = (0..3)
        .map(|_| std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port())
        .collect();
    cfg.aggregators = vec![format!("127.0.0.1:{}", ports[0]), format!("127.0.0.1:{}", ports[1])];
    cfg.attestation_server = format!("127.0.0.1:{}", ports[2]);
    let mem = simulate(&cfg, SimulateOptions::default()).unwrap();

    let sources: Vec<Box<dyn UpdateSource>> = cfg
        .ordered_parties()
        .unwrap()
        .iter()
        .map(|(id, _)| Box::new(splitagg::mesh::TrainerSource::from_config(&cfg, id).unwrap()) as Box<dyn UpdateSource>)
        .collect();
    let tcp = run_session(
        &cfg,
        &splitagg::mesh::TcpNetwork,
        sources,
        SessionOptions {
            record_history: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(tcp.parties[0].history, mem.history);
    let _ = ExperimentConfig::agg_id(0);
    let _: &dyn Network = &splitagg::mesh::TcpNetwork;
}
