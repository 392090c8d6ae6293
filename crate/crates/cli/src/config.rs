use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::Failure;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Reads a config file (TOML, or JSON by extension) into a JSON object.
/// A run manifest is accepted too: its `config` section is used, provided
/// it was written by `command`.
fn read_config(path: &Path, command: &str) -> Result<Map<String, Value>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(path, e))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?
    } else {
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        serde_json::to_value(table).map_err(|e| Failure::config(e.to_string()))?
    };
    let Value::Object(mut map) = value else {
        return Err(Failure::config(format!("{}: expected a table of options", path.display())));
    };
    if let (Some(Value::String(cmd)), Some(Value::Object(_))) = (map.get("command"), map.get("config")) {
        if cmd != command {
            return Err(Failure::config(format!(
                "{} is a manifest of `{cmd}`, not `{command}`",
                path.display()
            )));
        }
        let Some(Value::Object(cfg)) = map.remove("config") else { unreachable!() };
        return Ok(cfg);
    }
    Ok(map)
}

/// Overlays flags on the config file. Options left unset in both stay
/// `None` for the caller to default.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, file: Option<&Path>, command: &str) -> Result<T, Failure> {
    let Value::Object(flag_map) = serde_json::to_value(flags).map_err(|e| Failure::config(e.to_string()))? else {
        return Err(Failure::config("options must serialize to a table".into()));
    };
    let mut merged = match file {
        Some(p) => read_config(p, command)?,
        None => Map::new(),
    };
    for (k, v) in flag_map {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::config(format!("invalid options: {e}")))
}

pub fn require_input(path: &Path) -> Result<(), Failure> {
    match fs::metadata(path) {
        Ok(_) => Ok(()),
        Err(e) => Err(Failure::input(path, e)),
    }
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::input(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record written next to every artifact so the run can be replayed with
/// `--config run_manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Value,
    pub seeds: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seeds: Value) -> Result<Self, Failure> {
        Ok(RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config: serde_json::to_value(config).map_err(|e| Failure::config(e.to_string()))?,
            seeds,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let sha256 = sha256_file(path)?;
        self.inputs.push(InputHash { path: path.to_path_buf(), sha256 });
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, Failure> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Failure::config(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Failure::output(&path, e))?;
        Ok(path)
    }
}

pub fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::output(dir, e))
}

pub fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == ErrorKind::NotFound
}
