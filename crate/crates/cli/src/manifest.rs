//! Run manifests and layered config loading.
//!
//! Every command resolves its configuration from built-in defaults, an
//! optional `--config` file and explicit flags (in increasing priority) and
//! records the result in `manifest.json` before producing any output. A
//! manifest is itself a valid `--config` file, so passing it back replays the
//! run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};
use crate::output::{read_file, OutputDir};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    /// Records the SHA-256 of an input file.
    pub fn input(mut self, path: &Path) -> CliResult<Self> {
        let bytes = read_file(path)?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(self)
    }

    pub fn outputs(mut self, names: &[&str]) -> Self {
        self.outputs = names.iter().map(|n| n.to_string()).collect();
        self
    }

    pub fn write(&self, out: &OutputDir) -> CliResult<()> {
        out.write_json(MANIFEST_FILE, self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads a command config from `path`, which may hold either the bare config
/// object or a full manifest for the same command. Without a path the
/// built-in defaults apply.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let bytes = read_file(path)?;
    let bad = |source| CliError::ConfigFile {
        path: path.to_path_buf(),
        source,
    };
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(bad)?;
    let config = match value.get("command").and_then(|c| c.as_str()) {
        Some(found) if value.get("config").is_some() => {
            if found != command {
                return Err(CliError::Usage(format!(
                    "{} is a manifest for `{found}`, not `{command}`",
                    path.display()
                )));
            }
            value["config"].clone()
        }
        _ => value,
    };
    serde_json::from_value(config).map_err(bad)
}
