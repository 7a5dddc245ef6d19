//! On-disk trace format: one JSON file per slice with the config snapshot,
//! per-iteration records and paths (relative to the run root) of the saved
//! images.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use rnst_core::rnst::IterationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub schema_version: u32,
    pub slice_label: String,
    pub slice_index: usize,
    pub weights_checksum: String,
    pub config: RunConfig,
    pub records: Vec<IterationRecord>,
    /// Run-root-relative path of the (possibly corrupted) input slice.
    pub input_path: PathBuf,
    /// Run-root-relative path of the final reconstruction.
    pub final_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_path: Option<PathBuf>,
    /// Saved per-iteration iterates, when enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterate_paths: Vec<PathBuf>,
}

impl TraceFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).context("serializing trace")?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing trace {}", path.display()))
    }
}
