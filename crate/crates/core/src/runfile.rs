//! Run manifests: each command writes a `run.json` capturing its
//! fully-resolved configuration, and can be re-run from that file.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunFile {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
}

/// Write `run.json` for `command` with the resolved `config` embedded.
pub fn save_run(path: &Path, command: &str, config: &impl Serialize) -> Result<()> {
    let run = RunFile {
        format_version: RUN_FORMAT_VERSION,
        command: command.to_string(),
        config: serde_json::to_value(config)
            .map_err(|e| Error::json(path.display().to_string(), e))?,
    };
    let text = serde_json::to_string_pretty(&run)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a config of type `T` from either a bare config document or a full
/// `run.json` wrapper (the `config` field is used in that case).
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let config = match (value.get("command"), value.get("config")) {
        (Some(_), Some(c)) => c.clone(),
        _ => value,
    };
    serde_json::from_value(config).map_err(|e| Error::json(path.display().to_string(), e))
}

/// The command recorded in a `run.json`, if the file is such a wrapper.
pub fn run_command(path: &Path) -> Result<Option<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    Ok(value.get("command").and_then(|c| c.as_str()).map(String::from))
}
