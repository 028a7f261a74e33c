//! Run manifests: enough to re-run a command and check its outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments after the program name.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of the configuration file contents, when one was given.
    pub config_sha256: Option<String>,
    /// Inputs by path, with their SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file names, with their SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific settings.
    pub settings: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, settings: serde_json::Value) -> Self {
        Manifest {
            tool: "dpm".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args: std::env::args().skip(1).collect(),
            seed,
            config_sha256: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            settings,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> std::io::Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    /// Hashes the listed files in `dir` and writes the manifest beside them.
    pub fn finish(mut self, dir: &Path, files: &[&str]) -> std::io::Result<()> {
        for f in files {
            self.outputs.insert(f.to_string(), sha256_file(&dir.join(f))?);
        }
        let text = serde_json::to_string_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn load(dir: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }
}
