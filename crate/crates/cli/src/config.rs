//! Config files: TOML or JSON, chosen by extension.

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use motionsplat::model::ModelConfig;
use motionsplat::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Bad input from the command line or a config file; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Everything that determines a training run. Also the shape of the
/// `config.toml` snapshot written into each run directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).map_err(|e| e.to_string()),
        Some("toml") => toml::from_str(&text).map_err(|e| e.to_string()),
        _ => return Err(usage(format!("{}: config files must end in .toml or .json", path.display()))),
    };
    parsed.map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn save_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).context("serializing config")?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
