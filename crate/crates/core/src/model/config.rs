use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MctError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Class-token attention only.
    V1,
    /// Adds the patch-token CAM head and its loss.
    #[default]
    V2,
}

/// How class scores are read off the output class tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    AveragePool,
    MaxPool,
    FullyConnected,
}

impl HeadMode {
    pub const ALL: [HeadMode; 3] = [HeadMode::FullyConnected, HeadMode::MaxPool, HeadMode::AveragePool];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
        })
    }
}

impl FromStr for Variant {
    type Err = MctError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "v1" => Ok(Variant::V1),
            "v2" => Ok(Variant::V2),
            other => Err(MctError::Config(format!("unknown variant `{other}`"))),
        }
    }
}

impl fmt::Display for HeadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadMode::AveragePool => "average_pool",
            HeadMode::MaxPool => "max_pool",
            HeadMode::FullyConnected => "fully_connected",
        })
    }
}

impl FromStr for HeadMode {
    type Err = MctError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "average_pool" | "avg" => Ok(HeadMode::AveragePool),
            "max_pool" | "max" => Ok(HeadMode::MaxPool),
            "fully_connected" | "fc" => Ok(HeadMode::FullyConnected),
            other => Err(MctError::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Patches per image side; the token grid holds `grid_side²` patches.
    pub grid_side: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Number of final layers whose class attention is fused.
    pub fuse_layers: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub variant: Variant,
    pub head_mode: HeadMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            grid_side: 8,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            fuse_layers: 3,
            patch_size: 4,
            mlp_ratio: 4.0,
            variant: Variant::V2,
            head_mode: HeadMode::AveragePool,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MctError::Config(m));
        if self.num_classes < 1 {
            return fail("num_classes must be >= 1".into());
        }
        if self.grid_side < 2 {
            return fail(format!("grid_side must be >= 2, got {}", self.grid_side));
        }
        if self.num_heads < 1 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive".into());
        }
        if self.num_layers < 1 {
            return fail("num_layers must be >= 1".into());
        }
        if self.fuse_layers < 1 || self.fuse_layers > self.num_layers {
            return fail(format!(
                "fuse_layers must lie in [1, {}], got {}",
                self.num_layers, self.fuse_layers
            ));
        }
        if self.patch_size < 1 {
            return fail("patch_size must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn num_tokens(&self) -> usize {
        self.num_classes + self.num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_side(&self) -> usize {
        self.patch_size * self.grid_side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}
