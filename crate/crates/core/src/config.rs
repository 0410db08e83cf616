//! Flat key=value configuration text.
//!
//! One `key = value` pair per line, `#` comments, blank lines ignored.
//! Sections are plain prefixes in the key ("loss.lambda_unannotated"). The
//! reader tracks which keys were consumed so a run can reject unknown ones
//! with their line numbers.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct Config {
    /// key -> (line number, value); line 0 marks command-line overrides.
    entries: BTreeMap<String, (usize, String)>,
    consumed: RefCell<BTreeSet<String>>,
}

pub trait FromConfigValue: Sized {
    fn from_config(s: &str) -> std::result::Result<Self, String>;
}

impl FromConfigValue for String {
    fn from_config(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
}

impl FromConfigValue for bool {
    fn from_config(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("expected true or false, got {:?}", s)),
        }
    }
}

macro_rules! from_config_numeric {
    ($($t:ty),*) => {$(
        impl FromConfigValue for $t {
            fn from_config(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|_| format!("expected a {}, got {:?}", stringify!($t), s))
            }
        }
    )*}
}
from_config_numeric!(u8, u64, usize, f64);

/// Patch/image shapes like "48x48" or "12x48x48".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl FromConfigValue for Shape {
    fn from_config(s: &str) -> std::result::Result<Self, String> {
        let dims: std::result::Result<Vec<usize>, _> = s
            .split('x')
            .map(|tok| tok.parse::<usize>().map_err(|_| format!("bad shape {:?}", s)))
            .collect();
        let dims = dims?;
        if dims.is_empty() {
            return Err(format!("bad shape {:?}", s));
        }
        Ok(Shape(dims))
    }
}

/// Comma-separated class ids; "-" or the empty string mean none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdList(pub Vec<u8>);

impl FromConfigValue for IdList {
    fn from_config(s: &str) -> std::result::Result<Self, String> {
        if s == "-" || s.is_empty() {
            return Ok(IdList(vec![]));
        }
        let ids: std::result::Result<Vec<u8>, _> = s
            .split(',')
            .map(|tok| match tok.trim().parse::<u8>() {
                Ok(0) | Err(_) => Err(format!("bad class id {:?}", tok)),
                Ok(id) => Ok(id),
            })
            .collect();
        Ok(IdList(ids?))
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let (key, value) = s.split_once('=').ok_or_else(|| Error::Config {
                line,
                msg: format!("expected key=value, got {:?}", s),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config { line, msg: "empty key".into() });
            }
            if let Some((prev, _)) = entries.insert(key.clone(), (line, value.trim().to_string()))
            {
                return Err(Error::Config {
                    line,
                    msg: format!("duplicate key {:?} (first set on line {})", key, prev),
                });
            }
        }
        Ok(Config { entries, consumed: RefCell::new(BTreeSet::new()) })
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text)
    }

    pub fn empty() -> Config {
        Config::default()
    }

    /// Apply `--set key=value` pairs; they replace file entries.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (key, value) = p.split_once('=').ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("override {:?} is not key=value", p),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::Config { line: 0, msg: format!("override {:?} has an empty key", p) });
            }
            self.entries.insert(key.to_string(), (0, value.trim().to_string()));
        }
        Ok(())
    }

    pub fn get<T: FromConfigValue>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, value)) => {
                self.consumed.borrow_mut().insert(key.to_string());
                T::from_config(value)
                    .map(Some)
                    .map_err(|msg| Error::Config { line: *line, msg: format!("{}: {}", key, msg) })
            }
        }
    }

    pub fn get_or<T: FromConfigValue>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromConfigValue>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| Error::Config {
            line: 0,
            msg: format!("missing required key {:?}", key),
        })
    }

    /// All keys sharing a prefix, without consuming them.
    pub fn keys_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.entries.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }

    /// Error if any key was never read, naming each with its line.
    pub fn ensure_fully_consumed(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !consumed.contains(*k))
            .map(|(k, (line, _))| {
                if *line == 0 {
                    format!("{:?} (from --set)", k)
                } else {
                    format!("{:?} (line {})", k, line)
                }
            })
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config {
                line: 0,
                msg: format!("unknown keys: {}", unknown.join(", ")),
            })
        }
    }
}

/// Canonical rendering of resolved settings, sorted by key.
pub fn render_kv(pairs: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{}={}\n", k, v));
    }
    out
}
