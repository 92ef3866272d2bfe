//! Layered command configuration: flags override the config file, which
//! overrides built-in defaults.
//!
//! Each layer is a JSON object. The config file is TOML with one table per
//! command (`[train]`, `[gen-bound]`, …); keys are the snake_case field
//! names of the resolved configuration.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Section of a config file that applies to `command`, as a JSON object.
pub fn file_section(path: &Path, command: &str) -> Result<Map<String, Value>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    match table.get(command) {
        None => Ok(Map::new()),
        Some(toml::Value::Table(t)) => match serde_json::to_value(t) {
            Ok(Value::Object(m)) => Ok(m),
            _ => Err(CliError::Usage(format!("[{command}] is not a table"))),
        },
        Some(_) => Err(CliError::Usage(format!("[{command}] is not a table"))),
    }
}

/// Merges `defaults`, the optional file section and the explicitly given
/// flags (serialized with `None` fields omitted) into `T`.
pub fn resolve<T: DeserializeOwned>(
    command: &str,
    defaults: Value,
    file: Option<&Path>,
    flags: &impl Serialize,
) -> Result<T, CliError> {
    let mut merged = match defaults {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    if let Some(path) = file {
        merged.extend(file_section(path, command)?);
    }
    match serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))? {
        Value::Object(m) => merged.extend(m.into_iter().filter(|(_, v)| !v.is_null())),
        _ => unreachable!("flag structs serialize to objects"),
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("{command}: {e}")))
}
