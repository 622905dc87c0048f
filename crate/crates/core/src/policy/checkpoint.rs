//! Checkpoint file: one line of JSON metadata (config, format version and a
//! tensor directory with byte offsets into the payload) followed by the raw
//! little-endian `f64` payload.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyConfig, PolicyError, PolicyParams};
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "bppo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: PolicyConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

fn ckpt_err(e: impl std::fmt::Display) -> PolicyError {
    PolicyError::Checkpoint(e.to_string())
}

pub fn write_checkpoint(params: &PolicyParams, mut w: impl Write) -> Result<(), PolicyError> {
    let mut offset = 0;
    let tensors = params
        .names()
        .into_iter()
        .zip(params.tensors())
        .map(|(name, t)| {
            let bytes = t.len() * 8;
            let e = TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
                bytes,
            };
            offset += bytes;
            e
        })
        .collect();
    let header = Header {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        tensors,
        payload_bytes: offset,
    };
    let mut line = serde_json::to_vec(&header).map_err(ckpt_err)?;
    line.push(b'\n');
    w.write_all(&line).map_err(ckpt_err)?;
    let mut payload = Vec::with_capacity(offset);
    for t in params.tensors() {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&payload).map_err(ckpt_err)?;
    w.flush().map_err(ckpt_err)
}

pub fn read_checkpoint(r: impl Read) -> Result<PolicyParams, PolicyError> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line).map_err(ckpt_err)?;
    let header: Header = serde_json::from_slice(&line).map_err(ckpt_err)?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut payload = Vec::with_capacity(header.payload_bytes);
    r.read_to_end(&mut payload).map_err(ckpt_err)?;
    if payload.len() != header.payload_bytes {
        return Err(ckpt_err(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let bytes = payload
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| ckpt_err(format!("{} outside payload", e.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Tensor::new(e.shape.clone(), data).map_err(ckpt_err)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let params = PolicyParams::from_tensors(&header.config, tensors)?;
    for (e, name) in header.tensors.iter().zip(params.names()) {
        if e.name != name {
            return Err(ckpt_err(format!("tensor {} where {name} expected", e.name)));
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let f = std::fs::File::create(path).map_err(ckpt_err)?;
    write_checkpoint(params, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let f = std::fs::File::open(path).map_err(ckpt_err)?;
    read_checkpoint(f)
}
