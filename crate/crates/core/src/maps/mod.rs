//! From recorded attention to class localization maps.
//!
//! The class-to-patch block of the token-to-token attention gives one map
//! per class token; the patch-to-patch block, averaged over heads and
//! layers, is a row-stochastic affinity used to propagate map values between
//! similar patches. Maps are min-max normalized per class into `[0, 1]`.

mod export;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{MctError, Result};
use crate::model::{AttentionStack, ForwardRecord, ModelConfig, Variant};

pub use export::{
    affinity_to_bytes, grayscale_bytes, maps_from_csv, maps_to_csv, write_affinity, write_pgm, MapsCsvRow,
};

/// Affinity rows are used as averaged, never re-normalized.
pub const AFFINITY_ROWS_RENORMALIZED: bool = false;

/// `C` maps over the `N×N` patch grid, every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassLocalizationMaps {
    maps: Tensor,
    /// Normalizations applied beyond the one after attention fusion,
    /// in the order they happened.
    pub extra_normalizations: Vec<&'static str>,
}

impl ClassLocalizationMaps {
    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn into_tensor(self) -> Tensor {
        self.maps
    }

    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn grid_side(&self) -> usize {
        self.maps.shape()[1]
    }

    pub fn class_map(&self, c: usize) -> &[f64] {
        let m = self.grid_side() * self.grid_side();
        &self.maps.data()[c * m..(c + 1) * m]
    }

    /// Wraps already-normalized maps after checking the value contract.
    pub fn from_normalized(maps: Tensor) -> Result<Self> {
        check_cnn(&maps, "class_maps")?;
        if let Some(bad) = maps.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MctError::Config(format!("map value {bad} outside [0, 1]")));
        }
        Ok(Self {
            maps,
            extra_normalizations: Vec::new(),
        })
    }

    /// Per class: either all zeros, or minimum exactly 0 and maximum exactly 1.
    pub fn satisfies_contract(&self) -> bool {
        (0..self.num_classes()).all(|c| {
            let m = self.class_map(c);
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m.iter().all(|v| (0.0..=1.0).contains(v)) && ((lo == 0.0 && hi == 1.0) || hi == 0.0)
        })
    }
}

/// Patch-to-patch affinity `N×N×N×N`; `affinity(i,j,k,l)` weights how much
/// patch `(k,l)` contributes to patch `(i,j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseAffinity {
    affinity: Tensor,
}

impl PairwiseAffinity {
    /// From an `M×M` matrix with `M = N²`, reshaped row-major.
    pub fn from_matrix(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2()?;
        let n = (r as f64).sqrt().round() as usize;
        if r != c || n * n != r {
            return Err(MctError::shape("affinity", &[r, c], &[n * n, n * n]));
        }
        if matrix.data().iter().any(|&v| v < 0.0) {
            return Err(MctError::Config("affinity entries must be nonnegative".into()));
        }
        Ok(Self {
            affinity: matrix.reshape(&[n, n, n, n])?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.affinity
    }

    pub fn grid_side(&self) -> usize {
        self.affinity.shape()[0]
    }

    pub fn at(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let n = self.grid_side();
        self.affinity.data()[((i * n + j) * n + k) * n + l]
    }

    /// Row `(i, j)` as a flat length-`N²` slice.
    pub fn row(&self, i: usize, j: usize) -> &[f64] {
        let m = self.grid_side() * self.grid_side();
        let r = i * self.grid_side() + j;
        &self.affinity.data()[r * m..(r + 1) * m]
    }
}

/// Which parts of the pipeline contribute to the published maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "attn")]
    Attn,
    #[serde(rename = "attn+affinity")]
    AttnAffinity,
    #[serde(rename = "attn+cam")]
    AttnCam,
    #[serde(rename = "full")]
    Full,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Attn, Stage::AttnAffinity, Stage::AttnCam, Stage::Full];

    fn uses_cam(self) -> bool {
        matches!(self, Stage::AttnCam | Stage::Full)
    }

    fn uses_affinity(self) -> bool {
        matches!(self, Stage::AttnAffinity | Stage::Full)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Attn => "attn",
            Stage::AttnAffinity => "attn+affinity",
            Stage::AttnCam => "attn+cam",
            Stage::Full => "full",
        })
    }
}

impl FromStr for Stage {
    type Err = MctError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| MctError::Config(format!("unknown stage `{s}` (attn, attn+affinity, attn+cam, full)")))
    }
}

/// Mean of all head matrices of one layer.
pub fn head_average(stack: &AttentionStack, layer: usize) -> Result<Tensor> {
    if layer >= stack.num_layers() {
        return Err(MctError::Config(format!(
            "layer {layer} out of range for {} layers",
            stack.num_layers()
        )));
    }
    let heads = stack.layer(layer);
    let mut acc = heads[0].clone();
    for h in &heads[1..] {
        acc.add_assign(h);
    }
    acc.scale_in_place(1.0 / heads.len() as f64);
    Ok(acc)
}

fn block(a: &Tensor, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Tensor> {
    let n = a.shape()[1];
    let width = cols.len();
    let mut out = Vec::with_capacity(rows.len() * width);
    for r in rows.clone() {
        out.extend_from_slice(&a.data()[r * n + cols.start..r * n + cols.end]);
    }
    Tensor::new(&[rows.len(), width], out)
}

fn check_square(a: &Tensor, c: usize, m: usize, op: &'static str) -> Result<()> {
    if a.shape() != [c + m, c + m] {
        return Err(MctError::shape(op, a.shape(), &[c + m, c + m]));
    }
    Ok(())
}

/// Rows of the class tokens, columns of the patch tokens: `C×M`.
pub fn slice_class_to_patch(a_t2t: &Tensor, c: usize, m: usize) -> Result<Tensor> {
    check_square(a_t2t, c, m, "slice_class_to_patch")?;
    block(a_t2t, 0..c, c..c + m)
}

/// Patch rows, patch columns: `M×M`.
pub fn slice_patch_to_patch(a_t2t: &Tensor, c: usize, m: usize) -> Result<Tensor> {
    check_square(a_t2t, c, m, "slice_patch_to_patch")?;
    block(a_t2t, c..c + m, c..c + m)
}

/// Mean over the last `k` layers of the head-averaged class-to-patch blocks.
pub fn fuse_class_attention(stack: &AttentionStack, num_classes: usize, k: usize) -> Result<Tensor> {
    let layers = stack.num_layers();
    if k < 1 || k > layers {
        return Err(MctError::Config(format!(
            "fuse_layers must lie in [1, {layers}], got {k}"
        )));
    }
    let m = stack.num_tokens() - num_classes;
    let mut acc = Tensor::zeros(&[num_classes, m]);
    for l in layers - k..layers {
        acc.add_assign(&slice_class_to_patch(&head_average(stack, l)?, num_classes, m)?);
    }
    acc.scale_in_place(1.0 / k as f64);
    Ok(acc)
}

/// Reshapes a `C×M` block to `C×N×N`.
pub fn to_grid(maps: Tensor) -> Result<Tensor> {
    let (c, m) = maps.dims2()?;
    let n = (m as f64).sqrt().round() as usize;
    if n * n != m {
        return Err(MctError::shape("to_grid", &[c, m], &[c, n * n]));
    }
    maps.reshape(&[c, n, n])
}

fn check_cnn(maps: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match maps.shape() {
        &[c, n, n2] if n == n2 => Ok((c, n)),
        other => Err(MctError::shape(op, other, &[0, 0, 0])),
    }
}

/// Per-class `(x - min) / (max - min)`; a constant class map becomes zeros.
pub fn min_max_normalize(maps: &Tensor) -> Result<ClassLocalizationMaps> {
    let (c, n) = check_cnn(maps, "min_max_normalize")?;
    let m = n * n;
    let mut out = maps.clone();
    for ch in 0..c {
        let slot = &mut out.data_mut()[ch * m..(ch + 1) * m];
        let lo = slot.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = slot.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if range > 0.0 {
            for v in slot.iter_mut() {
                // clamp absorbs the last-ulp overshoot of the division
                *v = ((*v - lo) / range).clamp(0.0, 1.0);
            }
        } else {
            slot.fill(0.0);
        }
    }
    Ok(ClassLocalizationMaps {
        maps: out,
        extra_normalizations: Vec::new(),
    })
}

/// Mean over `layers` of the head-averaged patch-to-patch blocks.
pub fn build_affinity(stack: &AttentionStack, num_classes: usize, layers: &[usize]) -> Result<PairwiseAffinity> {
    if layers.is_empty() {
        return Err(MctError::Config("affinity layer set is empty".into()));
    }
    let m = stack.num_tokens() - num_classes;
    let mut acc = Tensor::zeros(&[m, m]);
    for &l in layers {
        acc.add_assign(&slice_patch_to_patch(&head_average(stack, l)?, num_classes, m)?);
    }
    acc.scale_in_place(1.0 / layers.len() as f64);
    PairwiseAffinity::from_matrix(acc)
}

/// All layers of the stack, the default affinity layer set.
pub fn all_layers(stack: &AttentionStack) -> Vec<usize> {
    (0..stack.num_layers()).collect()
}

/// `out(c,i,j) = Σ_{k,l} aff(i,j,k,l) · maps(c,k,l)`.
pub fn refine(maps: &Tensor, aff: &PairwiseAffinity) -> Result<Tensor> {
    let (c, n) = check_cnn(maps, "refine")?;
    if aff.grid_side() != n {
        return Err(MctError::shape("refine", maps.shape(), aff.tensor().shape()));
    }
    let m = n * n;
    let mut out = vec![0.0; c * m];
    for ch in 0..c {
        let src = &maps.data()[ch * m..(ch + 1) * m];
        for p in 0..m {
            let row = &aff.tensor().data()[p * m..(p + 1) * m];
            out[ch * m + p] = row.iter().zip(src).map(|(a, v)| a * v).sum();
        }
    }
    Tensor::new(&[c, n, n], out)
}

/// ReLU, then per-class min-max, transposed from `N×N×C` to `C×N×N`.
pub fn extract_patch_cam(features: &Tensor) -> Result<Tensor> {
    let &[n, n2, c] = features.shape() else {
        return Err(MctError::shape("extract_patch_cam", features.shape(), &[0, 0, 0]));
    };
    if n != n2 {
        return Err(MctError::shape("extract_patch_cam", features.shape(), &[n, n, c]));
    }
    let mut t = vec![0.0; c * n * n];
    for p in 0..n * n {
        for ch in 0..c {
            t[ch * n * n + p] = features.data()[p * c + ch].max(0.0);
        }
    }
    Ok(min_max_normalize(&Tensor::new(&[c, n, n], t)?)?.into_tensor())
}

/// Elementwise product of attention maps and PatchCAM maps.
pub fn fuse_with_patch_cam(attn_maps: &ClassLocalizationMaps, cam_maps: &Tensor) -> Result<Tensor> {
    attn_maps.maps.zip_map(cam_maps, "fuse_with_patch_cam", |a, b| a * b)
}

/// Localization maps from one forward record.
///
/// Attention fused over the last `config.fuse_layers` layers is normalized;
/// the selected stages (PatchCAM product, affinity refinement) follow, and a
/// final normalization is applied whenever any stage ran after the first one.
pub fn localize(record: &ForwardRecord, config: &ModelConfig, stage: Stage) -> Result<ClassLocalizationMaps> {
    localize_with(record, config, stage, config.fuse_layers, None)
}

/// [`localize`] with an explicit fusion depth and affinity layer set
/// (`None` = all layers).
pub fn localize_with(
    record: &ForwardRecord,
    config: &ModelConfig,
    stage: Stage,
    fuse_layers: usize,
    affinity_layers: Option<&[usize]>,
) -> Result<ClassLocalizationMaps> {
    let c = config.num_classes;
    let stack = &record.attention_stack;
    if stack.num_tokens() != config.num_tokens() || stack.num_layers() != config.num_layers {
        return Err(MctError::InvalidRecord(format!(
            "attention stack ({} layers, {} tokens) does not match config ({} layers, {} tokens)",
            stack.num_layers(),
            stack.num_tokens(),
            config.num_layers,
            config.num_tokens()
        )));
    }
    let attn = min_max_normalize(&to_grid(fuse_class_attention(stack, c, fuse_layers)?)?)?;
    if stage == Stage::Attn {
        return Ok(attn);
    }
    let mut steps = Vec::new();
    let mut current = attn.maps.clone();
    if stage.uses_cam() {
        let features = match (config.variant, &record.patch_cam_features) {
            (Variant::V2, Some(f)) => f,
            _ => {
                return Err(MctError::UnsupportedVariant {
                    variant: config.variant.to_string(),
                    what: "PatchCAM fusion",
                })
            }
        };
        current = fuse_with_patch_cam(&attn, &extract_patch_cam(features)?)?;
        steps.push("after_patch_cam_fusion");
    }
    if stage.uses_affinity() {
        let all = all_layers(stack);
        let aff = build_affinity(stack, c, affinity_layers.unwrap_or(&all))?;
        current = refine(&current, &aff)?;
        steps.push("after_affinity_refinement");
    }
    let mut out = min_max_normalize(&current)?;
    // one normalization at the end covers every step that ran
    out.extra_normalizations = vec![steps.last().copied().unwrap_or("final")];
    Ok(out)
}

/// The complete pipeline for the model's variant: V1 refines normalized
/// attention with the affinity; V2 first multiplies in the PatchCAM maps.
pub fn localization_pipeline(record: &ForwardRecord, config: &ModelConfig) -> Result<ClassLocalizationMaps> {
    let stage = match config.variant {
        Variant::V1 => Stage::AttnAffinity,
        Variant::V2 => Stage::Full,
    };
    localize(record, config, stage)
}
