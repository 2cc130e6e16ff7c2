use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::io::write_atomic;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Provenance record written once into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    /// SHA-256 (hex) of the configuration bytes.
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(
        command: &str,
        inputs: &[PathBuf],
        config_bytes: &[u8],
        seed: Option<u64>,
        started_unix_ms: u128,
    ) -> Self {
        RunManifest {
            command: command.into(),
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            config_hash: config_hash(config_bytes),
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix_ms,
            finished_unix_ms: now_ms(),
        }
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&out_dir.join(MANIFEST_NAME), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_known_bytes() {
        assert_eq!(
            config_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
