//! Flat `key = value` config files. Every key mirrors a long flag name
//! (`trip-threshold` or `trip_threshold`); flags given on the command line
//! win over the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("config line {}: expected key = value", i + 1))?;
            let key = key.trim().replace('_', "-");
            if values
                .insert(key.clone(), value.trim().to_string())
                .is_some()
            {
                bail!("config line {}: duplicate key {key}", i + 1);
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    /// Rejects keys the command does not understand, so typos surface.
    pub fn check_keys(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self
            .values
            .keys()
            .map(String::as_str)
            .filter(|k| !known.contains(k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            bail!("unknown config keys: {}", unknown.join(", "))
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| anyhow!("config key {key} = {v:?}: {e}"))
            })
            .transpose()
    }

    /// Flag value if given, else the file's, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    /// A boolean switch: on if the flag is present or the file says `true`.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get::<bool>(key)?.unwrap_or(false))
    }

    pub fn path(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.pick(flag, key)?
            .ok_or_else(|| anyhow!("--{key} is required (flag or config key)"))
    }
}
