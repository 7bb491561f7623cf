//! `RunManifest`: everything needed to rerun a command, written before it
//! does any work.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::settings::usage;

pub const GIT_DESCRIBE: &str = env!("CARRYON_GIT_DESCRIBE");

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Resolved settings; keys are sorted.
    pub config: Value,
    pub seed: u64,
    pub git_describe: String,
    /// Path to SHA-256 (hex) of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    /// Hashes every input; a missing input is a usage error.
    pub fn new<S: Serialize>(
        command: &str,
        settings: &S,
        seed: u64,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> anyhow::Result<Self> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(settings)?,
            seed,
            git_describe: GIT_DESCRIBE.to_string(),
            inputs: hashes,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// `<out>.manifest.json`
pub fn manifest_path(out: &Path) -> PathBuf {
    with_suffix(out, ".manifest.json")
}

pub fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
