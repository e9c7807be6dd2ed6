//! Binary checkpoint format.
//!
//! ```text
//! "KVSQ"                      4 bytes magic
//! version                     u32 little-endian (currently 1)
//! config length               u64 little-endian
//! config                      UTF-8 JSON ModelConfig
//! weights                     f32 little-endian, canonical order
//! ```
//!
//! The canonical weight order is embedding; for each layer
//! wq, wk, wv, wo, w_in, w_out, attn_norm, mlp_norm; final_norm; unembedding.
//! Each matrix is written row-major. Loading rejects any file whose length
//! differs from the one implied by the config.

use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::weights::{Model, ModelWeights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KVSQ";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let n_floats: usize = model.weights.params().iter().map(|p| p.data().len()).sum();
    let mut out = Vec::with_capacity(16 + config.len() + 4 * n_floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    for p in model.weights.params() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 16 {
        return Err(bad("file too short for header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing KVSQ magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let config_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let config_end = usize::try_from(config_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad("config length runs past end of file"))?;
    let config: ModelConfig = serde_json::from_slice(&bytes[16..config_end])
        .map_err(|e| Error::Checkpoint(format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut weights = ModelWeights::zeros_like(&config);
    let expected: usize = weights.params().iter().map(|p| p.data().len() * 4).sum();
    let payload = &bytes[config_end..];
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "weight payload is {} bytes, config implies {expected}",
            payload.len()
        )));
    }
    let mut chunks = payload.chunks_exact(4);
    for p in weights.params_mut() {
        for v in p.data_mut() {
            *v = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
        }
    }
    Model::new(config, weights).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}
