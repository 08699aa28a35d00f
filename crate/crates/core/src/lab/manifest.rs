//! Provenance record written next to every run's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub workers: usize,
    pub wall_clock_s: f64,
    /// Seconds per stage.
    pub stages: BTreeMap<String, f64>,
    pub files: Vec<FileDigest>,
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64, workers: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            workers,
            wall_clock_s: 0.0,
            stages: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn stage(&mut self, name: &str, seconds: f64) {
        self.stages.insert(name.to_string(), seconds);
    }

    /// Records an output file (path relative to `root` when possible).
    pub fn add_file(&mut self, root: &Path, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let shown = path.strip_prefix(root).unwrap_or(path);
        self.files.push(FileDigest {
            path: shown.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Writes `manifest-<command>.toml` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("manifest-{}.toml", self.command));
        crate::lab::output::write_text(&path, &self.to_toml())?;
        Ok(path)
    }
}
