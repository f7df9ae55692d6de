//! Artifact writing with overwrite protection and provenance sidecars.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Hash of the canonical JSON form of `spec`.
pub fn spec_hash(spec: &impl Serialize) -> Result<String, CliError> {
    Ok(sha256_hex(serde_json::to_string(spec)?.as_bytes()))
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    artifact: &'a str,
    command: &'a str,
    spec_sha256: &'a str,
    seed: u64,
    version: &'a str,
}

/// Writes artifacts for one command invocation.
#[derive(Debug, Clone)]
pub struct Output {
    pub force: bool,
    pub command: &'static str,
    pub spec_hash: String,
}

pub fn prov_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".prov.json");
    path.with_file_name(name)
}

impl Output {
    /// Fails if `path` exists and overwriting was not requested.
    pub fn claim(&self, path: &Path) -> Result<(), CliError> {
        if !self.force && (path.exists() || prov_path(path).exists()) {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        Ok(())
    }

    /// Runs `write` to produce `path`, then records its provenance.
    pub fn write<F>(&self, path: &Path, seed: u64, write: F) -> Result<(), CliError>
    where
        F: FnOnce(&Path) -> Result<(), CliError>,
    {
        self.claim(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        write(path)?;
        self.record(path, seed)
    }

    /// Writes the provenance sidecar for an already written `path`.
    pub fn record(&self, path: &Path, seed: u64) -> Result<(), CliError> {
        let prov = Provenance {
            artifact: &path.file_name().unwrap_or_default().to_string_lossy(),
            command: self.command,
            spec_sha256: &self.spec_hash,
            seed,
            version: VERSION,
        };
        let side = prov_path(path);
        let text = serde_json::to_string_pretty(&prov)? + "\n";
        std::fs::write(&side, text).map_err(|e| CliError::io(&side, e))
    }

    pub fn write_text(&self, path: &Path, seed: u64, text: &str) -> Result<(), CliError> {
        self.write(path, seed, |p| {
            std::fs::write(p, text).map_err(|e| CliError::io(p, e))
        })
    }
}
