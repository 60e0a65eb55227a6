//! Flat `key = value` run configuration.
//!
//! Every command resolves its settings through a [`Resolver`] seeded with
//! that command's key table (name + default). Values layer in a fixed
//! order — built-in defaults, then an optional config file, then explicit
//! command-line flags — and the fully-resolved result serializes back to
//! the same flat format so a run can be reproduced from its emitted
//! config alone.
//!
//! File format: UTF-8 text, one `key = value` per line, `#` starts a
//! full-line comment, blank lines ignored. Keys must be known to the
//! command (unknown keys are rejected by name) and may appear at most
//! once. Values are taken verbatim after trimming, so they may contain
//! `=` or spaces.

use std::collections::BTreeMap;
use std::fmt::Display;

use crate::{Error, Result};

/// Parses flat config text into (key, value) pairs in file order.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                idx + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", idx + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Layered settings for one command.
#[derive(Debug, Clone)]
pub struct Resolver {
    keys: &'static [(&'static str, &'static str)],
    values: BTreeMap<&'static str, String>,
}

impl Resolver {
    /// Starts from a command's key table of (name, default) entries.
    pub fn new(keys: &'static [(&'static str, &'static str)]) -> Self {
        let values = keys.iter().map(|&(k, d)| (k, d.to_string())).collect();
        Self { keys, values }
    }

    fn canonical(&self, key: &str) -> Result<&'static str> {
        self.keys
            .iter()
            .map(|&(k, _)| k)
            .find(|&k| k == key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))
    }

    /// Applies a config file's contents over the current values.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let mut seen = Vec::new();
        for (key, value) in parse_flat(text)? {
            let canon = self.canonical(&key)?;
            if seen.contains(&canon) {
                return Err(Error::Config(format!("duplicate config key `{key}`")));
            }
            seen.push(canon);
            self.values.insert(canon, value);
        }
        Ok(())
    }

    /// Sets one value (used for command-line flag overrides).
    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        let canon = self.canonical(key)?;
        self.values.insert(canon, value.to_string());
        Ok(())
    }

    pub fn get_str(&self, key: &str) -> Result<&str> {
        let canon = self.canonical(key)?;
        Ok(self.values[canon].as_str())
    }

    fn parse_with<T, F>(&self, key: &str, kind: &str, parse: F) -> Result<T>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        let raw = self.get_str(key)?;
        parse(raw).ok_or_else(|| {
            Error::Config(format!("config key `{key}`: expected {kind}, got `{raw}`"))
        })
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        self.parse_with(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.parse_with(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn get_u32(&self, key: &str) -> Result<u32> {
        self.parse_with(key, "an unsigned integer", |s| s.parse().ok())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        self.parse_with(key, "a number", |s| s.parse().ok())
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        self.parse_with(key, "true or false", |s| match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })
    }

    /// Optional float: empty value means absent.
    pub fn get_opt_f64(&self, key: &str) -> Result<Option<f64>> {
        if self.get_str(key)?.is_empty() {
            Ok(None)
        } else {
            self.get_f64(key).map(Some)
        }
    }

    /// Comma-separated float list; empty value means an empty list.
    pub fn get_f64_list(&self, key: &str) -> Result<Vec<f64>> {
        let raw = self.get_str(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "config key `{key}`: expected comma-separated numbers, got `{raw}`"
                    ))
                })
            })
            .collect()
    }

    /// Comma-separated unsigned integer list; empty value means empty.
    pub fn get_u32_list(&self, key: &str) -> Result<Vec<u32>> {
        let raw = self.get_str(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "config key `{key}`: expected comma-separated integers, got `{raw}`"
                    ))
                })
            })
            .collect()
    }

    /// The fully-resolved configuration, one sorted `key = value` line per
    /// key. Feeding this text back through [`Resolver::apply_file`]
    /// reproduces the same values.
    pub fn resolved_text(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        for (key, value) in &self.values {
            s.push_str(&format!("{key} = {value}\n"));
        }
        s
    }
}
