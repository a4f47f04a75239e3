//! Run manifests: what went in, what came out, and how long it took.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hash over the command, its flags and the input digests.
    pub config_hash: String,
    pub tool_version: String,
    pub jobs: Option<usize>,
    pub parameters: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<FileDigest>,
    pub warnings: Vec<String>,
    pub started_unix_seconds: f64,
    pub wall_clock_seconds: f64,
    /// Where this manifest was written.
    #[serde(skip)]
    pub path: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    jobs: Option<usize>,
    parameters: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    seeds: Vec<u64>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
    started: SystemTime,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, jobs: Option<usize>) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            jobs,
            parameters: BTreeMap::new(),
            inputs: Vec::new(),
            seeds: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn param(&mut self, name: &str, value: impl ToString) -> &mut Self {
        self.parameters.insert(name.to_string(), value.to_string());
        self
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.inputs.push(path.into());
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seeds.push(seed);
        self
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    pub fn warn(&mut self, message: impl Into<String>) -> &mut Self {
        self.warnings.push(message.into());
        self
    }

    /// Hashes inputs and outputs and writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> CliResult<RunManifest> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<CliResult<Vec<_>>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|p| FileDigest::of(p))
            .collect::<CliResult<Vec<_>>>()?;
        let config = serde_json::json!({
            "command": self.command,
            "parameters": self.parameters,
            "inputs": inputs.iter().map(|d| &d.sha256).collect::<Vec<_>>(),
            "seeds": self.seeds,
        });
        let m = RunManifest {
            command: self.command,
            config_hash: sha256_hex(config.to_string().as_bytes()),
            tool_version: TOOL_VERSION.to_string(),
            jobs: self.jobs,
            parameters: self.parameters,
            inputs,
            seeds: self.seeds,
            outputs,
            warnings: self.warnings,
            started_unix_seconds: self
                .started
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
            path: path.to_path_buf(),
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        Ok(m)
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// `manifest.json` inside a directory output.
pub fn inside(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}
