//! Flag / config-file / default merging and the resolved-config echo.

use std::fs;
use std::path::Path;

use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Reads a JSON config file. A top-level key named after the subcommand
/// scopes its settings; other top-level keys apply to every subcommand.
pub fn load_file(path: Option<&Path>, command: &str) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path).map_err(|e| lagdiff::Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(lagdiff::Error::from)?;
    let Value::Object(mut map) = value else {
        return Err(CliError::Usage(format!("{}: config must be a JSON object", path.display())));
    };
    let scoped = match map.remove(command) {
        Some(Value::Object(s)) => s,
        Some(_) => return Err(CliError::Usage(format!("config section {command:?} must be an object"))),
        None => Map::new(),
    };
    map.extend(scoped);
    Ok(map)
}

/// `flags > file > defaults`; null flags are ignored.
pub fn resolve<D, F>(defaults: &D, file: Map<String, Value>, flags: &F) -> Result<D, CliError>
where
    D: Serialize + DeserializeOwned,
    F: Serialize,
{
    let Value::Object(mut merged) = serde_json::to_value(defaults).map_err(lagdiff::Error::from)? else {
        unreachable!("resolved configs are structs");
    };
    for (k, v) in file {
        if merged.contains_key(&k) {
            merged.insert(k, v);
        }
    }
    if let Value::Object(f) = serde_json::to_value(flags).map_err(lagdiff::Error::from)? {
        for (k, v) in f {
            if !v.is_null() && merged.contains_key(&k) {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn flat(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flat(&key, x, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// Logs every resolved setting as `config command=<cmd> key=value`.
pub fn echo<T: Serialize>(command: &str, resolved: &T) {
    let mut pairs = Vec::new();
    if let Ok(v) = serde_json::to_value(resolved) {
        flat("", &v, &mut pairs);
    }
    for (k, v) in pairs {
        let v = if v.contains(char::is_whitespace) { format!("{v:?}") } else { v };
        info!("event=config command={command} {k}={v}");
    }
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T, CliError> {
    value
        .clone()
        .ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}
