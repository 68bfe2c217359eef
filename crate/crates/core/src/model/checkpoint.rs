//! Checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "MCTCKPT1"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON:
//!              {"format_version":1,"config":{..},"tensors":[{"name":..,"shape":[..]},..]}
//! payload      every tensor's values as f64, in header order, row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{MctError, Result};
use crate::model::config::ModelConfig;
use crate::model::params::ModelParameters;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCTCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParameters) -> Result<Vec<u8>> {
    params.check_layout(config)?;
    let named = params.named();
    let header = Header {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], origin: &str) -> Result<(ModelConfig, ModelParameters)> {
    let bad = |reason: &str| MctError::Format {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {}", header.format_version)));
    }
    header.config.validate()?;
    let mut payload = bytes[16 + len..].chunks_exact(8);
    let mut entries = header.tensors.iter();
    let layout = ModelParameters::zeros(&header.config);
    let params = layout.try_map(|name, t| {
        let entry = entries.next().ok_or_else(|| bad("too few tensors"))?;
        if entry.name != name || entry.shape != t.shape() {
            return Err(bad(&format!(
                "tensor `{}` {:?} does not match config (`{name}` {:?})",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let data = (0..t.len())
            .map(|_| {
                payload
                    .next()
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .ok_or_else(|| bad("truncated payload"))
            })
            .collect::<Result<Vec<f64>>>()?;
        Tensor::new(&entry.shape, data)
    })?;
    if entries.next().is_some() || payload.next().is_some() || !payload.remainder().is_empty() {
        return Err(bad("trailing data"));
    }
    Ok((header.config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParameters) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config, params)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParameters)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MctError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| MctError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| MctError::io(&tmp, e))?;
    f.sync_all().map_err(|e| MctError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| MctError::io(path, e))
}
