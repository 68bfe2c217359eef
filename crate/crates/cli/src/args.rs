use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mctformer::maps::Stage;
use mctformer::model::{HeadMode, ModelConfig, Variant};
use mctformer::training::{ConfigOverrides, RunParams};
use mctformer::Execution;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "mctformer", version, about = "Multi-class token transformer experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate a synthetic dataset archive.
    Generate(GenerateArgs),
    /// Train a model on a dataset archive.
    Train(TrainArgs),
    /// Export localization maps for every sample of a dataset.
    Infer(InferArgs),
    /// Score exported maps against a dataset's ground truth.
    Eval(EvalArgs),
    /// Head-mode and fused-layer ablations.
    Ablate(AblateArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Replay(_) => "replay",
        }
    }
}

/// Model and optimizer settings. Flag names follow the config field names;
/// `--config` supplies defaults for any of them.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct Settings {
    /// TOML file with any of these settings; command-line flags take precedence
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    #[arg(long)]
    pub grid_side: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub fuse_layers: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<f64>,
    /// v1 | v2
    #[arg(long)]
    pub variant: Option<Variant>,
    /// average_pool | max_pool | fully_connected
    #[arg(long)]
    pub head_mode: Option<HeadMode>,
    /// Drives every random choice of the command
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// sequential | parallel
    #[arg(long)]
    pub execution: Option<Execution>,
}

impl Settings {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            num_classes: self.num_classes,
            grid_side: self.grid_side,
            embed_dim: self.embed_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            fuse_layers: self.fuse_layers,
            patch_size: self.patch_size,
            mlp_ratio: self.mlp_ratio,
            variant: self.variant,
            head_mode: self.head_mode,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            execution: self.execution,
        }
    }

    /// Only the settings given on the command line or in the config file.
    pub fn explicit(&self) -> Result<ConfigOverrides> {
        let base = match &self.config {
            Some(path) => ConfigOverrides::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ConfigOverrides::default(),
        };
        Ok(base.merged(self.overrides()))
    }

    pub fn resolve(&self) -> Result<(ModelConfig, RunParams)> {
        Ok(self.explicit()?.resolve()?)
    }

    /// Fully specified settings, with no config file reference.
    pub fn resolved(model: &ModelConfig, run: &RunParams) -> Self {
        Settings {
            config: None,
            num_classes: Some(model.num_classes),
            grid_side: Some(model.grid_side),
            embed_dim: Some(model.embed_dim),
            num_layers: Some(model.num_layers),
            num_heads: Some(model.num_heads),
            fuse_layers: Some(model.fuse_layers),
            patch_size: Some(model.patch_size),
            mlp_ratio: Some(model.mlp_ratio),
            variant: Some(model.variant),
            head_mode: Some(model.head_mode),
            seed: Some(run.seed),
            epochs: Some(run.epochs),
            batch_size: Some(run.batch_size),
            lr: Some(run.lr),
            min_lr: Some(run.min_lr),
            weight_decay: Some(run.weight_decay),
            beta1: Some(run.beta1),
            beta2: Some(run.beta2),
            eps: Some(run.eps),
            execution: Some(run.execution),
        }
    }
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenerateArgs {
    /// Number of samples
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub count: u64,
    /// Output archive path; its directory must exist
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset archive from `generate`
    #[arg(long)]
    pub data: PathBuf,
    /// Receives checkpoint.mctckpt, loss.csv and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    #[serde(default)]
    pub quiet: bool,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Receives maps.csv, maps/*.pgm, meta.json and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// attn | attn+affinity | attn+cam | full (default: full for V2, attn+affinity for V1)
    #[arg(long)]
    pub stage: Option<Stage>,
    /// Also write the patch affinity of every sample
    #[arg(long)]
    #[serde(default)]
    pub export_affinity: bool,
    /// Settings must agree with the checkpoint; only --fuse-layers may differ
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    /// maps.csv from `infer`
    #[arg(long)]
    pub maps: PathBuf,
    /// Dataset the maps were inferred on
    #[arg(long)]
    pub data: PathBuf,
    /// Receives report.csv, summary.txt and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Comma-separated background thresholds (default 0.05..0.95 step 0.05)
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct AblateArgs {
    /// Training archive
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out archive the tables are measured on
    #[arg(long)]
    pub test: PathBuf,
    /// Receives head_modes.csv, k_sweep.csv and manifest.json
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Map stage scored in the head-mode table
    #[arg(long, default_value = "attn")]
    pub stage: Stage,
    /// Fused-layer counts to sweep (default 1..num_layers)
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(default)]
    pub quiet: bool,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
