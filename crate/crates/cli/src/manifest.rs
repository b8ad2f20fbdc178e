//! Per-run provenance record written next to every command's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A file and the SHA-256 of its bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

impl FileRef {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The full command line.
    pub args: Vec<String>,
    pub config_path: Option<String>,
    /// Resolved config text; rerunning with it and the same inputs reproduces
    /// every output byte for byte.
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<FileRef>,
    /// Model artifacts among the inputs, i.e. the upstream stages this run froze.
    pub checkpoints: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub tool_version: String,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    /// Headline numbers of the run, command specific.
    pub summary: serde_json::Value,
}

/// Collects the files a command reads and writes.
pub struct Recorder {
    command: String,
    config_path: Option<PathBuf>,
    config: String,
    seed: u64,
    inputs: Vec<PathBuf>,
    checkpoints: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: SystemTime,
    clock: Instant,
}

impl Recorder {
    pub fn new(command: &str, config_path: Option<&Path>, config: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config,
            seed,
            inputs: Vec::new(),
            checkpoints: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn checkpoint(&mut self, path: impl Into<PathBuf>) {
        let path = path.into();
        self.inputs.push(path.clone());
        self.checkpoints.push(path);
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Hashes every recorded file and writes the manifest to `path`.
    pub fn finish(self, path: &Path, summary: serde_json::Value) -> Result<RunManifest> {
        let refs = |paths: &[PathBuf]| {
            paths
                .iter()
                .map(|p| FileRef::of(p))
                .collect::<Result<Vec<_>>>()
        };
        let manifest = RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            config_path: self.config_path.map(|p| p.display().to_string()),
            config: self.config,
            seed: self.seed,
            inputs: refs(&self.inputs)?,
            checkpoints: refs(&self.checkpoints)?,
            outputs: refs(&self.outputs)?,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_secs: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
            summary,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")
            .with_context(|| format!("cannot write manifest {}", path.display()))?;
        Ok(manifest)
    }
}
