//! Layered settings: command-line flag, then config file, then built-in
//! default.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde_json::Value;

/// Parsed config file. A TOML file holds one table per subcommand plus
/// shared top-level keys; a run manifest (`.json`) is read through its
/// `config` object, so any past run can be replayed from its manifest.
#[derive(Debug, Default)]
pub struct FileConfig {
    root: Value,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        let root = if path.extension().is_some_and(|e| e == "json") {
            let mut v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            match v.get_mut("config") {
                Some(c) => c.take(),
                None => v,
            }
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        if !root.is_object() {
            bail!("config file {} must hold a table", path.display());
        }
        Ok(Self { root })
    }

    fn lookup(&self, section: &str, key: &str) -> Option<&Value> {
        self.root
            .get(section)
            .and_then(|s| s.get(key))
            .or_else(|| self.root.get(key).filter(|v| !v.is_object()))
    }

    pub fn get<T: DeserializeOwned>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.lookup(section, key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .with_context(|| format!("config key '{section}.{key}' has the wrong type")),
        }
    }

    /// Flag, else file, else `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, section: &str, key: &str, default: T) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(section, key)?.unwrap_or(default)),
        }
    }

    /// Flag, else file; absent when neither sets it.
    pub fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, section: &str, key: &str) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(section, key),
        }
    }
}
