//! `key=value` defaults for command-line options.
//!
//! ```text
//! # comments and blank lines are skipped
//! seed=3
//! trials=200
//! kernel=center-pivot
//! ```
//!
//! A flag given on the command line wins over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::report::Failure;

pub const KEYS: &[&str] = &[
    "seed",
    "report",
    "sequential",
    "backbone",
    "kernel",
    "trials",
    "size",
    "channels",
    "repeats",
    "steps",
    "loss_bound",
    "checkpoint",
    "export_episode",
    "vote_threshold",
    "ignore",
    "min_miou",
];

#[derive(Debug, Default)]
pub struct Config {
    source: Option<PathBuf>,
    values: BTreeMap<String, (String, usize)>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self, Failure> {
        let at = |n: usize, msg: String| Failure::usage(format!("{}:{n}: {msg}", source.display()));
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(i + 1, format!("expected key=value, got {line:?}")))?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(at(i + 1, format!("unknown key {k:?}")));
            }
            if values.insert(k.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(at(i + 1, format!("duplicate key {k:?}")));
            }
        }
        Ok(Self {
            source: Some(source.to_path_buf()),
            values,
        })
    }

    pub fn get<T>(&self, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        debug_assert!(KEYS.contains(&key), "{key} missing from KEYS");
        let Some((v, line)) = self.values.get(key) else {
            return Ok(None);
        };
        v.parse().map(Some).map_err(|e| {
            let src = self.source.as_deref().unwrap_or(Path::new("config"));
            Failure::usage(format!("{}:{line}: {key}: {e}", src.display()))
        })
    }

    /// `flag`, else the file's value, else `default`.
    pub fn pick<T>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }

    /// `flag`, else the file's value, if any.
    pub fn pick_opt<T>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T: FromStr,
        T::Err: Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// A boolean switch set by either the flag or the file.
    pub fn switch(&self, flag: bool, key: &str) -> Result<bool, Failure> {
        Ok(flag || self.get(key)?.unwrap_or(false))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_overrides() {
        let c = Config::parse("# defaults\nseed = 7\n\nmin-miou=0.5\n", Path::new("c.txt")).unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.get::<f64>("min_miou").unwrap(), Some(0.5));
        assert_eq!(c.pick(Some(3u64), "seed", 0).unwrap(), 3);
        assert_eq!(c.pick(None, "seed", 0u64).unwrap(), 7);
        assert_eq!(c.pick(None, "trials", 100usize).unwrap(), 100);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in ["seed", "colour=red", "seed=1\nseed=2"] {
            assert!(Config::parse(text, Path::new("c.txt")).is_err(), "{text}");
        }
        let c = Config::parse("seed=x", Path::new("c.txt")).unwrap();
        let e = c.get::<u64>("seed").unwrap_err();
        assert!(e.message.contains("c.txt:1"), "{}", e.message);
    }
}
