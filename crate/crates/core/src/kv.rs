//! Plain-text `key = value` files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key-value pairs. Blank lines and `#` comments are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::InvalidConfig(format!("line {}: empty key", i + 1)));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(KvFile { entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let p = path.as_ref();
        std::fs::write(p, self.to_string()).map_err(|e| Error::io(p, e))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parsed value, `None` when absent.
    pub fn parse_opt<V: FromStr>(&self, key: &str) -> Result<Option<V>>
    where
        V::Err: fmt::Display,
    {
        self.get(key)
            .map(|s| {
                s.parse::<V>()
                    .map_err(|e| Error::InvalidConfig(format!("`{key} = {s}`: {e}")))
            })
            .transpose()
    }

    pub fn require<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: fmt::Display,
    {
        self.parse_opt(key)?
            .ok_or_else(|| Error::InvalidConfig(format!("missing key `{key}`")))
    }

    /// Comma-separated list; empty string gives an empty list.
    pub fn list<V: FromStr>(&self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: fmt::Display,
    {
        let Some(s) = self.get(key) else {
            return Ok(None);
        };
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<V>()
                    .map_err(|e| Error::InvalidConfig(format!("`{key}` item `{t}`: {e}")))
            })
            .collect::<Result<Vec<V>>>()
            .map(Some)
    }
}

impl fmt::Display for KvFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}
