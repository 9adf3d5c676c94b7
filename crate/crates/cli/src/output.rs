//! Result files are staged in memory and only written once a command has
//! succeeded, each through a temp file and an atomic rename.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, contents: impl Into<Vec<u8>>) {
        self.files.push((name.into(), contents.into()));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
        text.push('\n');
        self.add(name, text);
    }
}

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub arguments: Vec<String>,
    pub config: PathBuf,
    pub config_sha256: String,
    pub seed: u64,
    pub artifact_version: String,
    pub outputs: Vec<OutputEntry>,
    pub wall_time_s: f64,
}

/// Run context shared by every subcommand.
pub struct Run {
    pub subcommand: &'static str,
    pub config: PathBuf,
    pub config_sha256: String,
    pub started: Instant,
}

impl Run {
    pub fn new(subcommand: &'static str, config: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(config)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", config.display())))?;
        Ok(Self {
            subcommand,
            config: config.to_path_buf(),
            config_sha256: sha256_hex(&bytes),
            started: Instant::now(),
        })
    }

    /// Writes all artifacts, then `manifest.json` listing them.
    pub fn commit(self, out: &Path, seed: u64, artifacts: Artifacts) -> Result<RunManifest, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let mut outputs = Vec::with_capacity(artifacts.files.len());
        for (name, bytes) in &artifacts.files {
            write_atomic(out, name, bytes)?;
            outputs.push(OutputEntry { file: name.clone(), sha256: sha256_hex(bytes) });
        }
        let manifest = RunManifest {
            subcommand: self.subcommand.to_string(),
            arguments: std::env::args().skip(1).collect(),
            config: self.config,
            config_sha256: self.config_sha256,
            seed,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        write_atomic(out, "manifest.json", text.as_bytes())?;
        Ok(manifest)
    }
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), CliError> {
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(&target, e))?;
    tmp.persist(&target).map_err(|e| CliError::io(&target, e.error))?;
    Ok(())
}
