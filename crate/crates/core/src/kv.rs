//! Flat `key = value` text: the format of config files, dataset descriptors
//! and the checkpoint config blob. `#` starts a comment line.

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(k, _)| k == key) {
            return Err(Error::config(format!("line {}: duplicate key {key:?}", n + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for key {key:?}")))
}
