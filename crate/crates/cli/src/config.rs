//! Resolution of command settings: defaults, then flags, then a `--config`
//! JSON document merged on top.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Recursively overlay `over` onto `base`. Objects merge key by key; any
/// other value replaces the base value.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply the JSON file at `path` (if any) over `from_flags`.
pub fn resolve<T: Serialize + DeserializeOwned>(from_flags: T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(from_flags);
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let over: Value = serde_json::from_str(&text)
        .map_err(|e| microdiff::Error::Format(format!("config {}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&from_flags)?;
    merge(&mut base, over);
    let resolved = serde_json::from_value(base)
        .map_err(|e| microdiff::Error::Format(format!("config {}: {e}", path.display())))?;
    Ok(resolved)
}

/// SHA-256 of the canonical (key-sorted) JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    Ok(hex_digest(&serde_json::to_vec(&canonical)?))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
