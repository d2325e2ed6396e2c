// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests: what a run produced and the digests to check it against.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub target_seconds: f64,
    pub spd_seconds: f64,
    pub eval_seconds: f64,
    pub spd_steps: u64,
    pub spd_seconds_per_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    /// SHA-256 of the canonical TOML form of the config.
    pub config_hash: String,
    pub seed: u64,
    pub deterministic: bool,
    pub checkpoints: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    /// Zeroed in deterministic mode so that reruns are byte-identical.
    pub timings: Timings,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hashes `dir/rel`.
pub fn record(dir: &Path, rel: &str) -> Result<FileRecord> {
    let path = dir.join(rel);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(FileRecord {
        path: rel.to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

impl RunManifest {
    pub fn files(&self) -> impl Iterator<Item = &FileRecord> {
        self.checkpoints.iter().chain(&self.outputs)
    }

    /// Writes `manifest.json` into `dir` after checking every referenced file.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.verify(dir)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Every referenced file exists and matches its digest.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for f in self.files() {
            let now = record(dir, &f.path)?;
            if now != *f {
                return Err(Error::Checkpoint {
                    path: dir.join(&f.path),
                    reason: format!(
                        "digest mismatch: manifest {}, file {}",
                        f.sha256, now.sha256
                    ),
                });
            }
        }
        Ok(())
    }
}
