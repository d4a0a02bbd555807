use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use dgae_core::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Provenance record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub git_describe: String,
    /// SHA-256 of the resolved config text.
    pub config_sha256: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
}

pub fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config_text: &str, seed: u64, started_unix: f64, outputs: &[PathBuf]) -> Self {
        RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_describe: env!("DGAE_GIT_DESCRIBE").into(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            started_unix,
            finished_unix: now(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// `<file>.manifest.json` for single-file outputs.
pub fn beside(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}
