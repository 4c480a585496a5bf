//! Flat `key = value` text used for config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Ordered key/value pairs; later duplicates overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    map: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Invalid(format!("config line {}: expected `key = value`", i + 1))
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Invalid(format!("config line {}: empty key", i + 1)));
            }
            kv.map.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.map.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn read<V: FromStr>(&self, key: &str, slot: &mut V) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = v
                .parse()
                .map_err(|_| Error::Invalid(format!("config key `{key}`: cannot parse `{v}`")))?;
        }
        Ok(())
    }

    pub fn read_list<V: FromStr>(&self, key: &str, slot: &mut Vec<V>) -> Result<()> {
        if let Some(v) = self.get(key) {
            *slot = v
                .split(',')
                .map(|p| {
                    p.trim().parse().map_err(|_| {
                        Error::Invalid(format!("config key `{key}`: cannot parse `{v}`"))
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Errors on any key outside `known`.
    pub fn reject_unknown(&self, known: &[&str]) -> Result<()> {
        match self.keys().find(|k| !known.contains(k)) {
            Some(k) => Err(Error::Invalid(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        self.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn join_list<V: Display>(items: &[V]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
