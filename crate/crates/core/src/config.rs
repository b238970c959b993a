//! Config canonicalization and hashing, plus TOML loading with strict keys.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Compact JSON with object keys sorted at every level.
pub fn canonical_json<S: Serialize>(value: &S) -> Result<String> {
    let v = sort_keys(serde_json::to_value(value)?);
    Ok(serde_json::to_string(&v)?)
}

/// SHA-256 of the canonical JSON, hex-encoded.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    Ok(hex::encode(Sha256::digest(canonical_json(value)?.as_bytes())))
}

/// Parses TOML, reporting the offending field and line on failure.
pub fn parse_toml<D: DeserializeOwned>(text: &str) -> Result<D> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_toml<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path)?;
    parse_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Inner {
        b: f64,
        a: u32,
    }

    #[derive(Serialize, Deserialize, Debug, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Outer {
        z: Inner,
        y: String,
    }

    #[test]
    fn hash_ignores_order_and_comments() {
        let a: Outer = parse_toml("y = \"x\"\n[z]\na = 1\nb = 0.5\n").unwrap();
        let b: Outer = parse_toml("# comment\ny = \"x\" # trailing\n[z]\nb = 0.5\na = 1\n").unwrap();
        assert_eq!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        let c: Outer = parse_toml("y = \"x\"\n[z]\na = 2\nb = 0.5\n").unwrap();
        assert_ne!(config_hash(&a).unwrap(), config_hash(&c).unwrap());
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = parse_toml::<Outer>("y = \"x\"\n[z]\na = 1\nb = 0.5\nlamda = 3\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
    }
}
