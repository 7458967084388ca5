//! Run manifest: which config produced which files, and how long each phase took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub seconds: f64,
    /// Paths relative to the run directory.
    pub files: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub env: String,
    pub preset: String,
    pub seeds: Vec<u64>,
    pub note: String,
    pub phases: BTreeMap<String, PhaseRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            config_hash: config.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            env: config.env.name().to_string(),
            preset: config.preset.name().to_string(),
            seeds: config.seeds.clone(),
            note: format!(
                "{} seed(s); confidence intervals are Student-t over per-seed means",
                config.seeds.len()
            ),
            phases: BTreeMap::new(),
        }
    }

    /// The manifest in `dir`, or a fresh one. A manifest written for a
    /// different config is replaced.
    pub fn load_or_new(dir: &Path, config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
            if m.config_hash == config.hash() {
                return Ok(m);
            }
            log::warn!("manifest in {} belongs to another config; starting a new one", dir.display());
        }
        Ok(Self::new(config))
    }

    /// Records a phase and writes the manifest. Every listed file must exist.
    pub fn record(&mut self, dir: &Path, phase: &str, seconds: f64, files: Vec<PathBuf>) -> Result<(), HarnessError> {
        for f in &files {
            if !dir.join(f).exists() {
                return Err(HarnessError::MissingArtifact(dir.join(f)));
            }
        }
        self.phases.insert(phase.to_string(), PhaseRecord { seconds, files });
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
