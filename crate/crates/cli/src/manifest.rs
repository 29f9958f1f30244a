//! The `manifest.json` written next to every run's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> CliResult<Self> {
        Ok(FileRecord {
            path: path.display().to_string(),
            sha256: file_sha256(path)?,
        })
    }
}

/// Everything needed to rerun a command: the merged config, the seed and
/// digests of every input. Output digests let a rerun be compared, and
/// `timings` is the only field expected to differ between reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, FileRecord>,
    pub outputs: BTreeMap<String, FileRecord>,
    pub timings: BTreeMap<String, f64>,
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Accumulates manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                manifest_version: MANIFEST_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: std::env::args().collect(),
                seed,
                config,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timings: BTreeMap::new(),
            },
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.manifest.inputs.insert(role.to_string(), FileRecord::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.manifest.outputs.insert(role.to_string(), FileRecord::of(path)?);
        Ok(())
    }

    pub fn set_config(&mut self, config: Value) {
        self.manifest.config = config;
    }

    pub fn timing(&mut self, name: &str, seconds: f64) {
        self.manifest.timings.insert(name.to_string(), seconds);
    }

    /// Writes the manifest to `path` and returns it.
    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        self.manifest
            .timings
            .insert("total_seconds".into(), self.started.elapsed().as_secs_f64());
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(self.manifest)
    }
}

/// `dir/manifest.json` for directory outputs, `file.manifest.json` for a
/// single output file.
pub fn manifest_path_for_dir(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn manifest_path_for_file(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
