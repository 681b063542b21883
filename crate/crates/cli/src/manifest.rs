use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use bssgan::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE: &str = "run_manifest.json";

/// Provenance of one command invocation, written once per output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective settings.
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn config_hash(settings: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(settings.to_string().as_bytes()))
}

impl RunManifest {
    pub fn start(command: &str, settings: &serde_json::Value, seed: u64) -> Self {
        let t = now();
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash(settings),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: t,
            finished_unix: t,
            artifacts: Vec::new(),
        }
    }

    /// Stamp the end time and write the manifest into `dir`. Artifact paths
    /// are stored relative to `dir` when possible.
    pub fn finish(mut self, dir: &Path, artifacts: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = now();
        self.artifacts = artifacts.into_iter().map(|p| p.strip_prefix(dir).map(Path::to_path_buf).unwrap_or(p)).collect();
        let path = dir.join(FILE);
        let body = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(&path, body).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_settings() {
        let a = config_hash(&serde_json::json!({"seed": 1}));
        let b = config_hash(&serde_json::json!({"seed": 2}));
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&serde_json::json!({"seed": 1})));
        assert_eq!(a.len(), 64);
    }
}
