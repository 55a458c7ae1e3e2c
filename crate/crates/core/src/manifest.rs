//! Run manifest: what produced the files in an output directory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{ExperimentConfig, StageSeeds};
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub seeds: StageSeeds,
    /// Commands that have written into this directory, in order of first use.
    pub commands: Vec<String>,
    /// Produced file name -> SHA-256 (hex).
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the config with the output directory blanked, so the same
/// experiment written to two places carries the same hash.
pub fn config_hash(config: &ExperimentConfig) -> Result<String> {
    let mut c = config.clone();
    c.output_dir = Default::default();
    Ok(sha256_hex(&serde_json::to_vec(&c)?))
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(config)?,
            master_seed: config.master_seed,
            seeds: config.seeds(),
            commands: Vec::new(),
            files: BTreeMap::new(),
        })
    }

    /// Existing manifest of `dir` if it was made with the same config,
    /// otherwise a fresh one.
    pub fn load_or_new(dir: &Path, config: &ExperimentConfig) -> Result<Self> {
        let fresh = Self::new(config)?;
        let path = dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(old) = serde_json::from_str::<RunManifest>(&text) {
                if old.config_hash == fresh.config_hash && old.tool_version == fresh.tool_version {
                    return Ok(old);
                }
            }
        }
        Ok(fresh)
    }

    pub fn record_command(&mut self, name: &str) {
        if !self.commands.iter().any(|c| c == name) {
            self.commands.push(name.to_string());
        }
    }

    /// Hash a produced file (path relative to `dir`) into the manifest.
    pub fn record_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = std::fs::read(dir.join(name))?;
        self.files.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Files whose current content no longer matches the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        self.files
            .iter()
            .filter(|(name, sum)| std::fs::read(dir.join(name)).map(|b| &sha256_hex(&b) != *sum).unwrap_or(true))
            .map(|(name, _)| name.clone())
            .collect()
    }
}
