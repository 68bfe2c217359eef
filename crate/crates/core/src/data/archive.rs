//! Dataset archive.
//!
//! ```text
//! magic        8 bytes   "MCTDATA1"
//! header_len   u64 LE
//! header       JSON {"format_version":1,"seed":..,"count":..,"geometry":{..}}
//! per sample:  labels      C bytes (0/1)
//!              gt_mask     N² bytes, row-major, 0 = background, c+1 = class c
//!              image       3·S·S f64 LE, channel-major row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::synth::{SceneGeometry, SyntheticSample};
use crate::error::{MctError, Result};
use crate::model::write_atomic;
use crate::training::LabelVector;

pub const DATASET_MAGIC: &[u8; 8] = b"MCTDATA1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub seed: u64,
    pub count: usize,
    pub geometry: SceneGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub geometry: SceneGeometry,
    pub samples: Vec<SyntheticSample>,
}

impl Dataset {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = DatasetHeader {
            format_version: 1,
            seed: self.seed,
            count: self.samples.len(),
            geometry: self.geometry,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for s in &self.samples {
            out.extend(s.labels.as_slice().iter().map(|&p| p as u8));
            out.extend_from_slice(&s.gt_mask);
            for v in s.image.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| MctError::Format {
            path: origin.to_string(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
            return Err(bad("missing dataset magic".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: DatasetHeader = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
        if header.format_version != 1 {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        let geo = header.geometry;
        let (c, n, side) = (geo.num_classes, geo.grid_side, geo.image_side());
        let record = c + n * n + 3 * side * side * 8;
        let payload = &bytes[16 + len..];
        if payload.len() != record * header.count {
            return Err(bad(format!(
                "payload is {} bytes, expected {} samples of {record}",
                payload.len(),
                header.count
            )));
        }
        let samples = payload
            .chunks_exact(record)
            .map(|chunk| {
                let labels = LabelVector::new(chunk[..c].iter().map(|&b| b != 0).collect())?;
                let gt_mask = chunk[c..c + n * n].to_vec();
                if gt_mask.iter().any(|&m| m as usize > c) {
                    return Err(bad("mask label out of range".into()));
                }
                let image = chunk[c + n * n..]
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect();
                Ok(SyntheticSample {
                    image: Tensor::new(&[3, side, side], image)?,
                    labels,
                    gt_mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed: header.seed,
            geometry: geo,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MctError::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}
