//! Checkpoint files: one JSON header line carrying the format version and the
//! SHA-256 of the payload, then the JSON payload itself. Floats are written
//! in shortest round-trip form, so loading restores the state exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use super::TrainState;
use crate::encoder::{Architecture, EncoderParams, SgdState};
use crate::error::{Error, Result};
use crate::maps::LabelMap;
use crate::prototypes::PrototypeBank;

pub const FORMAT: &str = "pixproto-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    payload_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredLabels {
    height: usize,
    width: usize,
    /// Hex of the raw class bytes, 255 = unlabelled.
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    config: TrainConfig,
    iteration: usize,
    params: Vec<f64>,
    velocity: Vec<f64>,
    source_bank: PrototypeBank,
    target_bank: PrototypeBank,
    static_labels: Vec<StoredLabels>,
}

pub fn encode_checkpoint(config: &TrainConfig, state: &TrainState) -> String {
    let payload = Payload {
        config: config.clone(),
        iteration: state.iteration,
        params: state.params.values.clone(),
        velocity: state.sgd.velocity.clone(),
        source_bank: state.source_bank.clone(),
        target_bank: state.target_bank.clone(),
        static_labels: state
            .static_labels
            .iter()
            .map(|y| StoredLabels {
                height: y.height(),
                width: y.width(),
                data: hex::encode(y.raw()),
            })
            .collect(),
    };
    let body = serde_json::to_string(&payload).expect("checkpoint payload serializes");
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        payload_sha256: hex::encode(Sha256::digest(body.as_bytes())),
    };
    format!("{}\n{body}\n", serde_json::to_string(&header).expect("header serializes"))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode_checkpoint(text: &str) -> Result<(TrainConfig, TrainState)> {
    let (head, body) = text.split_once('\n').ok_or_else(|| corrupt("missing header line"))?;
    let header: Header = serde_json::from_str(head).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(corrupt(format!("unknown format {:?}", header.format)));
    }
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    let body = body.strip_suffix('\n').unwrap_or(body);
    if hex::encode(Sha256::digest(body.as_bytes())) != header.payload_sha256 {
        return Err(corrupt("payload checksum mismatch"));
    }
    let payload: Payload = serde_json::from_str(body).map_err(|e| corrupt(format!("payload: {e}")))?;
    let config = payload.config;
    config.validate().map_err(|e| corrupt(format!("stored config: {e}")))?;
    let arch = Architecture::new(&config.encoder, 3, config.classes()).map_err(|e| corrupt(e.to_string()))?;
    if payload.params.len() != arch.num_params() || payload.velocity.len() != arch.num_params() {
        return Err(corrupt("parameter count does not match the stored architecture"));
    }
    if payload.params.iter().chain(&payload.velocity).any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter"));
    }
    for bank in [&payload.source_bank, &payload.target_bank] {
        bank.check_consistent().map_err(|e| corrupt(e.to_string()))?;
        if bank.classes() != config.classes() || bank.dim() != arch.embedding_dim() {
            return Err(corrupt("prototype bank shape does not match the config"));
        }
    }
    let static_labels = payload
        .static_labels
        .into_iter()
        .map(|s| {
            let data = hex::decode(&s.data).map_err(|e| corrupt(format!("static labels: {e}")))?;
            LabelMap::from_vec(s.height, s.width, config.classes(), data).map_err(|e| corrupt(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let state = TrainState {
        params: EncoderParams {
            arch,
            values: payload.params,
        },
        sgd: SgdState {
            velocity: payload.velocity,
        },
        source_bank: payload.source_bank,
        target_bank: payload.target_bank,
        static_labels,
        iteration: payload.iteration,
    };
    Ok((config, state))
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, state))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrainState)> {
    let text = std::fs::read_to_string(path).map_err(|e| corrupt(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&text)
}
