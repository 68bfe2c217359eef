//! Map and affinity export formats.
//!
//! - grayscale: binary PGM (`P5`), one byte per patch, value `round(255·v)`
//! - maps CSV: `sample,class,row,col,value` with shortest round-trip floats
//! - affinity: one JSON header line `{"shape":[N,N,N,N],"dtype":"f64le"}`
//!   followed by the raw little-endian values

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{MctError, Result};
use crate::maps::{ClassLocalizationMaps, PairwiseAffinity};
use crate::model::write_atomic;

/// `round(255·v)` for every cell of one class map.
pub fn grayscale_bytes(map: &[f64]) -> Vec<u8> {
    map.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

pub fn write_pgm(path: &Path, side: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{side} {side}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| MctError::io(path, e))
}

pub const MAPS_CSV_HEADER: &str = "sample,class,row,col,value";

pub fn maps_to_csv(maps: &[ClassLocalizationMaps]) -> String {
    let mut out = String::from(MAPS_CSV_HEADER);
    out.push('\n');
    for (s, m) in maps.iter().enumerate() {
        let n = m.grid_side();
        for c in 0..m.num_classes() {
            for (p, v) in m.class_map(c).iter().enumerate() {
                writeln!(out, "{s},{c},{},{},{v}", p / n, p % n).expect("write to string");
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapsCsvRow {
    pub sample: usize,
    pub class: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Parses the maps CSV back into per-sample maps. Rows may come in any order
/// but every `(sample, class, row, col)` cell must appear exactly once.
pub fn maps_from_csv(text: &str, num_classes: usize, grid_side: usize) -> Result<Vec<ClassLocalizationMaps>> {
    let bad = |reason: String| MctError::Format {
        path: "maps csv".into(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MAPS_CSV_HEADER) {
        return Err(bad(format!("expected header `{MAPS_CSV_HEADER}`")));
    }
    let per_sample = num_classes * grid_side * grid_side;
    let mut cells: Vec<Option<f64>> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(format!("line {}: expected 5 fields", ln + 2)));
        }
        let idx = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| bad(format!("line {}: {e}", ln + 2)))
        };
        let (s, c, r, col) = (idx(f[0])?, idx(f[1])?, idx(f[2])?, idx(f[3])?);
        let v: f64 = f[4].trim().parse().map_err(|e| bad(format!("line {}: {e}", ln + 2)))?;
        if c >= num_classes || r >= grid_side || col >= grid_side {
            return Err(bad(format!("line {}: cell out of range", ln + 2)));
        }
        let at = s * per_sample + (c * grid_side + r) * grid_side + col;
        if cells.len() <= at {
            cells.resize(at + 1, None);
        }
        if cells[at].replace(v).is_some() {
            return Err(bad(format!("line {}: duplicate cell", ln + 2)));
        }
    }
    if !cells.len().is_multiple_of(per_sample) || cells.iter().any(Option::is_none) {
        return Err(bad("missing cells".into()));
    }
    cells
        .chunks(per_sample)
        .map(|chunk| {
            let data = chunk.iter().map(|v| v.expect("checked")).collect();
            ClassLocalizationMaps::from_normalized(Tensor::new(&[num_classes, grid_side, grid_side], data)?)
        })
        .collect()
}

pub fn affinity_to_bytes(aff: &PairwiseAffinity) -> Vec<u8> {
    let header = serde_json::json!({ "shape": aff.tensor().shape(), "dtype": "f64le" });
    let mut out = format!("{header}\n").into_bytes();
    for v in aff.tensor().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_affinity(path: &Path, aff: &PairwiseAffinity) -> Result<()> {
    write_atomic(path, &affinity_to_bytes(aff))
}
