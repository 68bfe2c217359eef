use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MctError, Result};
use crate::model::{HeadMode, ModelConfig, Variant};
use crate::parallel::Execution;
use crate::training::trainer::RunParams;

/// Flat key-value run configuration. Every key is optional; unset keys keep
/// their defaults. Keys are the `ModelConfig` and `RunParams` field names.
///
/// ```toml
/// num_classes = 3
/// grid_side = 8
/// variant = "V2"
/// head_mode = "average_pool"
/// lr = 5e-4
/// epochs = 40
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub num_classes: Option<usize>,
    pub grid_side: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub fuse_layers: Option<usize>,
    pub patch_size: Option<usize>,
    pub mlp_ratio: Option<f64>,
    pub variant: Option<Variant>,
    pub head_mode: Option<HeadMode>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub min_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub execution: Option<Execution>,
}

macro_rules! merge_fields {
    ($base:ident, $top:ident; $($f:ident),*) => {
        ConfigOverrides { $($f: $top.$f.or($base.$f)),* }
    };
}

macro_rules! apply_fields {
    ($src:ident, $dst:ident; $($f:ident),*) => {
        $(if let Some(v) = $src.$f { $dst.$f = v; })*
    };
}

impl ConfigOverrides {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| MctError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MctError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| MctError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Keys set in `top` win over keys set in `self`.
    pub fn merged(self, top: ConfigOverrides) -> Self {
        let base = self;
        merge_fields!(base, top;
            num_classes, grid_side, embed_dim, num_layers, num_heads, fuse_layers, patch_size,
            mlp_ratio, variant, head_mode, seed, epochs, batch_size, lr, min_lr, weight_decay,
            beta1, beta2, eps, execution)
    }

    pub fn apply_model(&self, model: &mut ModelConfig) {
        let src = self;
        apply_fields!(src, model;
            num_classes, grid_side, embed_dim, num_layers, num_heads, fuse_layers, patch_size,
            mlp_ratio, variant, head_mode);
    }

    pub fn apply_run(&self, run: &mut RunParams) {
        let src = self;
        apply_fields!(src, run;
            seed, epochs, batch_size, lr, min_lr, weight_decay, beta1, beta2, eps, execution);
    }

    /// Defaults with these overrides applied, validated.
    pub fn resolve(&self) -> Result<(ModelConfig, RunParams)> {
        let mut model = ModelConfig::default();
        let mut run = RunParams::default();
        self.apply_model(&mut model);
        self.apply_run(&mut run);
        model.validate()?;
        run.validate()?;
        Ok((model, run))
    }
}
