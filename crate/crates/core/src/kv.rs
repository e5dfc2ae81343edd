//! Plain-text `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys
//! are unique. Typed readers report the key and line of a bad value, and
//! [`KvMap::finish`] rejects keys nobody asked for.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{EosError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, (String, usize)>,
    used: std::collections::BTreeSet<String>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(EosError::Config(format!("line {}: expected key = value", i + 1)));
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(EosError::Config(format!("line {}: empty key", i + 1)));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(EosError::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Ok(KvMap {
            entries,
            used: Default::default(),
        })
    }

    pub fn insert(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Overwrites `target` if `key` is present.
    pub fn read<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *target = v
                .parse()
                .map_err(|_| EosError::Config(format!("line {line}: bad value {v:?} for {key}")))?;
            self.used.insert(key.to_string());
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn read_list<T: FromStr>(&mut self, key: &str, target: &mut Vec<T>) -> Result<()> {
        if let Some((v, line)) = self.entries.get(key) {
            *target = v
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| EosError::Config(format!("line {line}: bad list {v:?} for {key}")))?;
            self.used.insert(key.to_string());
        }
        Ok(())
    }

    /// Fails on keys that no `read` consumed.
    pub fn finish(self) -> Result<()> {
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(EosError::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}
