//! Versioned binary checkpoints: magic, JSON header, parameter payload and a
//! trailing SHA-256 of everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mat::Mat;
use super::model::{ModelConfig, Predictor};
use crate::binio::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NFBCKP01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    codebook_key: String,
    tensors: Vec<TensorInfo>,
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub model: Predictor,
    pub codebook_key: String,
    /// Hex SHA-256 of the checkpoint file.
    pub hash: String,
}

pub fn checkpoint_bytes(model: &Predictor, codebook_key: &str) -> Result<Vec<u8>> {
    let p = &model.params;
    let header = Header {
        version: CHECKPOINT_VERSION,
        model: model.cfg.clone(),
        codebook_key: codebook_key.to_string(),
        tensors: (0..p.len())
            .map(|k| TensorInfo { name: p.names[k].clone(), rows: p.values[k].rows, cols: p.values[k].cols, trainable: p.trainable[k] })
            .collect(),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION)?;
    put_blob(&mut buf, serde_json::to_string(&header)?.as_bytes())?;
    for v in &p.values {
        put_f64s(&mut buf, &v.data)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(digest.as_slice());
    Ok(buf)
}

/// Writes the checkpoint and returns its hash.
pub fn save_checkpoint(path: &Path, model: &Predictor, codebook_key: &str) -> Result<String> {
    let bytes = checkpoint_bytes(model, codebook_key)?;
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::HashMismatch("checkpoint payload does not match its digest".into()));
    }
    let mut r = body;
    expect_magic(&mut r, MAGIC)?;
    let version = get_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header: Header = serde_json::from_slice(&get_blob(&mut r, 1 << 24)?)?;
    let mut model = Predictor::new(header.model.clone(), 0)?;
    if model.params.len() != header.tensors.len() {
        return Err(Error::Format("checkpoint tensor list does not match the model layout".into()));
    }
    for (k, t) in header.tensors.iter().enumerate() {
        let slot = &model.params.values[k];
        if model.params.names[k] != t.name || slot.shape() != (t.rows, t.cols) {
            return Err(Error::Format(format!("tensor {} has an unexpected name or shape", t.name)));
        }
        model.params.values[k] = Mat::from_vec(t.rows, t.cols, get_f64s(&mut r, t.rows * t.cols)?);
        model.params.trainable[k] = t.trainable;
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(LoadedCheckpoint { model, codebook_key: header.codebook_key, hash: sha256_hex(bytes) })
}
