//! Report emission: deterministic JSON/CSV writers, content hashing, and the
//! run manifest. Nothing here embeds timestamps, so reruns with identical
//! inputs produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Records what a run consumed and produced. Hashes make any silent
/// nondeterminism across reruns detectable by diffing manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    /// file name -> sha256 of content, for inputs consumed
    pub inputs: BTreeMap<String, String>,
    /// file name -> sha256 of content, for artifacts written
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, label: &str, path: &Path) -> Result<()> {
        self.outputs.insert(label.to_string(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("manifest.json"), self)
    }
}

/// Pretty JSON with a trailing newline. Field order follows the struct
/// definition (maps must be BTreeMap for stable key order).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Minimal CSV writer: fixed headers, `{:?}`-free float formatting via Ryu
/// through the standard Display, no quoting (callers pass clean fields).
pub fn write_csv(path: &Path, headers: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&headers.join(","));
    text.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), headers.len());
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
