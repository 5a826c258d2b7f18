//! Layered settings: built-in defaults, then a JSON/TOML file, then flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Reads a config file as a JSON object. `.toml` files are parsed as TOML,
/// anything else as JSON.
pub fn read_file(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
    } else {
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?
    };
    match value {
        Value::Object(m) => Ok(m),
        _ => Err(Failure::usage(format!("config {} must be a table/object", path.display()))),
    }
}

/// Flags serialized with `None` fields skipped.
pub fn flag_map<T: Serialize>(flags: &T) -> Map<String, Value> {
    match serde_json::to_value(flags).expect("flags serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// `defaults <- file <- flags`, key by key.
pub fn layer<T: Serialize>(defaults: &T, file: Option<&Map<String, Value>>, flags: Map<String, Value>) -> Map<String, Value> {
    let Value::Object(mut out) = serde_json::to_value(defaults).expect("defaults serialize") else {
        unreachable!("settings are structs")
    };
    for (k, v) in file.into_iter().flatten() {
        out.insert(k.clone(), v.clone());
    }
    out.extend(flags);
    out
}

pub fn finish<T: DeserializeOwned>(map: Map<String, Value>, what: &str) -> Result<T, Failure> {
    serde_json::from_value(Value::Object(map)).map_err(|e| Failure::usage(format!("{what} settings: {e}")))
}

/// Removes keys the caller handles itself before the strict parse.
pub fn take(map: &mut Map<String, Value>, key: &str) -> Option<Value> {
    map.remove(key)
}
