//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment line, keys are unique. The
//! resolved-config snapshot each run writes uses the same format, so a
//! snapshot can be fed back with `--config`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const SNAPSHOT_FILE: &str = "resolved.conf";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::format("config", format!("line {}: bad key `{key}`", n + 1)));
            }
            if entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::format("config", format!("line {}: duplicate key `{key}`", n + 1)));
            }
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::format("config", format!("`{key} = {v}`: {e}"))))
            .transpose()
    }

    /// CLI value if given, else the file's value, else `default`.
    pub fn resolve<T: FromStr>(&self, key: &str, cli: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match cli {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::format("config", format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let c = ConfigFile::parse("# run\nseed = 3\n\nmask_ratio=0.6\nloss = masked\n").unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(3));
        assert_eq!(c.get::<f32>("mask_ratio").unwrap(), Some(0.6));
        assert_eq!(c.raw("loss"), Some("masked"));
        assert_eq!(ConfigFile::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_malformed() {
        assert!(ConfigFile::parse("seed 3").is_err());
        assert!(ConfigFile::parse("seed = 1\nseed = 2").is_err());
        assert!(ConfigFile::parse(" = 2").is_err());
        assert!(ConfigFile::parse("seed = x").unwrap().get::<u64>("seed").is_err());
        assert!(ConfigFile::parse("sed = 1").unwrap().check_keys(&["seed"]).is_err());
    }

    #[test]
    fn cli_overrides_file() {
        let c = ConfigFile::parse("epochs = 10").unwrap();
        assert_eq!(c.resolve("epochs", Some(4usize), 1).unwrap(), 4);
        assert_eq!(c.resolve("epochs", None, 1).unwrap(), 10);
        assert_eq!(c.resolve("batch_size", None, 8usize).unwrap(), 8);
    }
}
