//! Binary checkpoint container.
//!
//! Layout: `LPALCKPT` magic, u32 version, u32 header length, JSON header,
//! raw little-endian f32 tensor data in layout order, SHA-256 of everything
//! before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig, Provenance};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"LPALCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    seed: u64,
    provenance: Provenance,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let header = Header {
        fingerprint: model.config().fingerprint(),
        seed: model.seed(),
        provenance: model.provenance(),
        config: model.config().clone(),
        tensors: model
            .layout()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header.len() + model.param_count() * 4 + DIGEST_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in model.params() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint written for `config`; the stored fingerprint must match.
pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("missing magic header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = body.get(16..16 + header_len).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(header_bytes).map_err(|e| corrupt(&format!("bad header: {e}")))?;

    let expected = config.fingerprint();
    if header.fingerprint != expected {
        return Err(Error::FingerprintMismatch {
            expected,
            found: header.fingerprint,
        });
    }
    if header.config.fingerprint() != header.fingerprint {
        return Err(corrupt("header config disagrees with its fingerprint"));
    }

    let mut data = &body[16 + header_len..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        if data.len() < numel * 4 {
            return Err(corrupt(&format!("tensor {} truncated", entry.name)));
        }
        let (raw, rest) = data.split_at(numel * 4);
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.push(Tensor::new(entry.shape.clone(), values).map_err(|e| corrupt(&e.to_string()))?);
        data = rest;
    }
    if !data.is_empty() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Model::from_parts(header.config, params, header.seed, header.provenance).map_err(|e| corrupt(&e.to_string()))
}
