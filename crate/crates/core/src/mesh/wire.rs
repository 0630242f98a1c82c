//! Length-prefixed JSON framing and the protocol message set.

use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::attestation::{AttestationReport, RejectReason, SecretBlob};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_FRAME: usize = 256 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    AttestReport {
        report: AttestationReport,
    },
    AttestResult {
        agg_id: String,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<RejectReason>,
    },
    SecretBlob {
        blob: SecretBlob,
    },
    GetAggKey {
        agg_id: String,
    },
    AggKey {
        agg_id: String,
        scheme: String,
        /// Absent while the aggregator has not been attested.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        key_b64: Option<String>,
    },
    Challenge {
        agg_id: String,
        nonce_b64: String,
    },
    ChallengeResp {
        agg_id: String,
        nonce_b64: String,
        signature_b64: String,
    },
    Register {
        party_id: String,
        weight: u64,
        /// Paillier public modulus (decimal) for encrypted fusion sessions.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        paillier_n: Option<String>,
    },
    RegisterAck {
        party_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        party_index: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reject: Option<String>,
    },
    /// Follower → initiator, once per session.
    PeerHello {
        agg_index: usize,
    },
    StartRound {
        round_id: u64,
    },
    RoundOpen {
        round_id: u64,
    },
    Upload {
        round_id: u64,
        party_id: String,
        agg_index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ciphertexts_b64: Option<Vec<String>>,
    },
    Fused {
        round_id: u64,
        agg_index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        payload_b64: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ciphertexts_b64: Option<Vec<String>>,
    },
    RoundDone {
        round_id: u64,
        node: String,
        /// SHA-256 of a party's post-round model.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checksum_hex: Option<String>,
    },
    Abort {
        round_id: u64,
        reason: String,
    },
    TrainingComplete,
    Error {
        reason: String,
    },
}

impl WireMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            WireMessage::AttestReport { .. } => "attest_report",
            WireMessage::AttestResult { .. } => "attest_result",
            WireMessage::SecretBlob { .. } => "secret_blob",
            WireMessage::GetAggKey { .. } => "get_agg_key",
            WireMessage::AggKey { .. } => "agg_key",
            WireMessage::Challenge { .. } => "challenge",
            WireMessage::ChallengeResp { .. } => "challenge_resp",
            WireMessage::Register { .. } => "register",
            WireMessage::RegisterAck { .. } => "register_ack",
            WireMessage::PeerHello { .. } => "peer_hello",
            WireMessage::StartRound { .. } => "start_round",
            WireMessage::RoundOpen { .. } => "round_open",
            WireMessage::Upload { .. } => "upload",
            WireMessage::Fused { .. } => "fused",
            WireMessage::RoundDone { .. } => "round_done",
            WireMessage::Abort { .. } => "abort",
            WireMessage::TrainingComplete => "training_complete",
            WireMessage::Error { .. } => "error",
        }
    }
}

/// Length prefix plus JSON body.
pub fn encode_message(msg: &WireMessage) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg)?;
    let len = u32::try_from(body.len())
        .map_err(|_| Error::protocol("message body exceeds 4 GiB"))?;
    let mut out = Vec::with_capacity(body.len() + 4);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_body(body: &[u8]) -> Result<WireMessage> {
    serde_json::from_slice(body).map_err(|e| Error::protocol(format!("malformed message: {e}")))
}

/// Decodes exactly one complete frame.
pub fn decode_message(frame: &[u8], max_body: usize) -> Result<WireMessage> {
    if frame.len() < 4 {
        return Err(Error::protocol("truncated frame header"));
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if len > max_body {
        return Err(Error::protocol(format!("frame of {len} bytes exceeds limit {max_body}")));
    }
    let body = &frame[4..];
    if body.len() != len {
        return Err(Error::protocol(format!(
            "frame declares {len} bytes but carries {}",
            body.len()
        )));
    }
    decode_body(body)
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, msg: &WireMessage) -> Result<()> {
    let bytes = encode_message(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame body. `Ok(None)` on clean end-of-stream at a frame
/// boundary.
pub fn read_frame<R: Read + ?Sized>(r: &mut R, max_body: usize) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::protocol("truncated frame header")),
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len > max_body {
        return Err(Error::protocol(format!("frame of {len} bytes exceeds limit {max_body}")));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::protocol("truncated frame body"),
        _ => e.into(),
    })?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::encode_f64_payload;

    #[test]
    fn start_round_frame_layout() {
        let bytes = encode_message(&WireMessage::StartRound { round_id: 1 }).unwrap();
        let body = br#"{"type":"start_round","round_id":1}"#;
        assert_eq!(body.len(), 35);
        assert_eq!(&bytes[..4], &[0, 0, 0, 0x23]);
        assert_eq!(&bytes[4..], body);
        assert_eq!(
            decode_message(&bytes, DEFAULT_MAX_FRAME).unwrap(),
            WireMessage::StartRound { round_id: 1 }
        );
    }

    #[test]
    fn payload_encoding_is_little_endian() {
        assert_eq!(encode_f64_payload(&[1.0]), "AAAAAAAA8D8=");
    }

    #[test]
    fn unknown_type_and_bad_frames_are_protocol_errors() {
        let frame = |body: &[u8]| {
            let mut f = (body.len() as u32).to_be_bytes().to_vec();
            f.extend_from_slice(body);
            f
        };
        for body in [
            &br#"{"type":"launch_missiles"}"#[..],
            br#"{"round_id":1}"#,
            br#"{"type":"start_round","round_id":1,"extra":2}"#,
            b"not json",
        ] {
            assert!(matches!(
                decode_message(&frame(body), DEFAULT_MAX_FRAME),
                Err(Error::Protocol(_))
            ));
        }
        let good = encode_message(&WireMessage::TrainingComplete).unwrap();
        assert!(decode_message(&good[..good.len() - 1], DEFAULT_MAX_FRAME).is_err());
        assert!(decode_message(&good, 4).is_err());
        assert!(decode_message(&good[..2], DEFAULT_MAX_FRAME).is_err());
    }

    #[test]
    fn stream_reader_handles_boundaries() {
        let mut stream = Vec::new();
        write_frame(&mut stream, &WireMessage::StartRound { round_id: 3 }).unwrap();
        write_frame(&mut stream, &WireMessage::TrainingComplete).unwrap();
        let mut r = &stream[..];
        let a = read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap().unwrap();
        assert_eq!(decode_body(&a).unwrap(), WireMessage::StartRound { round_id: 3 });
        let b = read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap().unwrap();
        assert_eq!(decode_body(&b).unwrap(), WireMessage::TrainingComplete);
        assert!(read_frame(&mut r, DEFAULT_MAX_FRAME).unwrap().is_none());

        let mut cut = &stream[..6];
        assert!(read_frame(&mut cut, DEFAULT_MAX_FRAME).is_err());
        let mut oversize = &stream[..];
        assert!(read_frame(&mut oversize, 8).is_err());
    }
}
