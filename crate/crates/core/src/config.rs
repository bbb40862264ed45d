//! Layered configuration: defaults, then a TOML or JSON file, then
//! `key=value` overrides addressed by dotted paths.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Reads a config file as a JSON value. `.toml` files are parsed as TOML,
/// everything else as JSON.
pub fn load_value(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "toml") {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            reason: e.message().to_string(),
        })?;
        Ok(serde_json::to_value(table)?)
    } else {
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })
    }
}

/// Dotted paths of every leaf of `value`, sorted.
pub fn valid_keys(value: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &path, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(value, "", &mut out);
    out.sort();
    out
}

fn unknown_key(key: &str, root: &Value) -> Error {
    Error::Config(format!(
        "unknown key `{key}`; valid keys: {}",
        valid_keys(root).join(", ")
    ))
}

/// Overlays `layer` onto `base`. Keys absent from `base` are rejected.
pub fn merge(base: &mut Value, layer: &Value) -> Result<()> {
    let root = base.clone();
    merge_at(base, layer, "", &root)
}

fn merge_at(base: &mut Value, layer: &Value, prefix: &str, root: &Value) -> Result<()> {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| unknown_key(&path, root))?;
                merge_at(slot, v, &path, root)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

/// Parses `key=value`. The value is read as JSON when possible and as a
/// plain string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets the entry at a dotted path, which must already exist.
pub fn apply_override(base: &mut Value, key: &str, value: Value) -> Result<()> {
    let root = base.clone();
    let mut slot = base;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| unknown_key(key, &root))?,
            _ => return Err(unknown_key(key, &root)),
        };
    }
    if slot.is_object() && !value.is_object() {
        return Err(Error::Config(format!("`{key}` is a section; set one of its fields")));
    }
    *slot = value;
    Ok(())
}

/// Resolves a typed config from defaults, an optional file and overrides.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Value>,
    overrides: &[String],
) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(f) = file {
        if !f.is_object() {
            return Err(Error::Config("config file must hold a table of keys".into()));
        }
        merge(&mut value, f)?;
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        apply_override(&mut value, &k, v)?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Reads a top-level string field from an optional layer and overrides,
/// later sources winning.
pub fn peek_string(file: Option<&Value>, overrides: &[String], key: &str) -> Result<Option<String>> {
    let mut out = file
        .and_then(|f| f.get(key))
        .and_then(Value::as_str)
        .map(str::to_string);
    for o in overrides {
        let (k, v) = parse_override(o)?;
        if k == key {
            out = Some(v.as_str().map_or_else(|| v.to_string(), str::to_string));
        }
    }
    Ok(out)
}

/// Empty JSON table.
pub fn empty() -> Value {
    Value::Object(Map::new())
}
