//! JSON config files with `key.path=value` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{CliError, CliResult};

/// Deep-merges `overlay` into `base`; objects merge key by key, anything
/// else replaces.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_set(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Validation(format!("--set expects key=value, got {assignment:?}")))?;
    if key.is_empty() {
        return Err(CliError::Validation(format!(
            "--set has an empty key in {assignment:?}"
        )));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let obj = node.as_object_mut().expect("just made an object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Object(Map::new()));
    }
    Ok(())
}

/// Defaults of `T`, then the config file, then each override in order.
pub fn load<T>(path: Option<&Path>, sets: &[String]) -> CliResult<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let mut value = serde_json::to_value(T::default()).map_err(|e| CliError::Runtime(e.to_string()))?;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| CliError::Runtime(format!("reading {}: {e}", p.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("{}: invalid JSON: {e}", p.display())))?;
        merge(&mut value, file);
    }
    for s in sets {
        apply_set(&mut value, s)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Validation(format!("invalid configuration: {e}")))
}
