//! Checkpoint container: the magic string "FSDAG1", a little-endian u64
//! header length, a JSON header (model config, class count, named tensor
//! index with shapes and byte offsets), then the raw little-endian f64
//! payloads. Loading validates every tensor shape against the header and
//! the header against the config-derived parameter layout.

use super::config::ModelConfig;
use super::params::ModelParams;
use super::ModelError;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"FSDAG1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    n_classes: usize,
    tensors: Vec<TensorEntry>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint { path: path.display().to_string(), msg: msg.into() }
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let named = params.named();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset });
        offset += (t.numel() * 8) as u64;
    }
    let header = Header {
        config: params.config.clone(),
        n_classes: params.n_classes,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &named {
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| ckpt_err(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ckpt_err(path, "missing FSDAG1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let header_end = 14 + header_len;
    if bytes.len() < header_end {
        return Err(ckpt_err(path, "truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    header.config.validate().map_err(|e| ckpt_err(path, e))?;
    let payload = &bytes[header_end..];

    let mut params = ModelParams::init(header.config.clone(), header.n_classes, 0);
    let expected = params.named().len();
    if header.tensors.len() != expected {
        return Err(ckpt_err(
            path,
            format!("header lists {} tensors, config implies {expected}", header.tensors.len()),
        ));
    }
    for entry in &header.tensors {
        let tensor = params
            .tensor(&entry.name)
            .ok_or_else(|| ckpt_err(path, format!("unknown tensor {}", entry.name)))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(ckpt_err(
                path,
                format!(
                    "tensor {} has shape {:?} in the header but the config implies {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                ),
            ));
        }
        let numel = tensor.numel();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if payload.len() < end {
            return Err(ckpt_err(path, format!("truncated payload for tensor {}", entry.name)));
        }
        let values: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ckpt_err(path, format!("non-finite value in tensor {}", entry.name)));
        }
        let dst = params.tensor_mut(&entry.name).unwrap();
        dst.values_mut().copy_from_slice(&values);
        dst.clear_grad();
    }
    Ok(params)
}
