use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use mctformer::model::{write_atomic, ModelConfig};
use mctformer::training::RunParams;
use serde::{Deserialize, Serialize};

use crate::args::Command;

pub const MANIFEST_VERSION: u32 = 1;

/// Everything needed to repeat a command. `invocation` holds the command
/// with every setting resolved, so a replay does not depend on config files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub invocation: Command,
    pub seed: Option<u64>,
    pub config: Option<ModelConfig>,
    pub run: Option<RunParams>,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: PathBuf,
    pub argv: Vec<String>,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(invocation: Command, output: PathBuf) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            command: invocation.name().to_string(),
            invocation,
            seed: None,
            config: None,
            run: None,
            dataset: None,
            checkpoint: None,
            output,
            argv: std::env::args().collect(),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes()).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        anyhow::ensure!(
            m.format_version == MANIFEST_VERSION,
            "manifest {} has format version {}, expected {MANIFEST_VERSION}",
            path.display(),
            m.format_version
        );
        Ok(m)
    }
}
