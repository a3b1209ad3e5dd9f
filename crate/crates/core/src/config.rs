//! Flat `key = value` experiment files with `[section]` headers.
//!
//! Keys are addressed as `section.key`. Lists are comma separated. `#` starts
//! a comment. Every key the file sets must be read by the consumer, so typos
//! fail loudly with the offending line.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, WsError};

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    /// 0 for values set outside the file (command-line overrides).
    line: usize,
}

#[derive(Debug, Default)]
pub struct Config {
    entries: BTreeMap<String, Entry>,
    used: RefCell<BTreeSet<String>>,
}

fn config_err(line: usize, msg: impl Into<String>) -> WsError {
    WsError::Config { line, msg: msg.into() }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = no + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| config_err(line, "unterminated section header"))?.trim();
                if !valid_name(name) {
                    return Err(config_err(line, format!("bad section name {name:?}")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| config_err(line, "expected key = value"))?;
            let key = key.trim();
            if !valid_name(key) {
                return Err(config_err(line, format!("bad key {key:?}")));
            }
            let full = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            let entry = Entry { value: value.trim().to_string(), line };
            if let Some(prev) = entries.insert(full.clone(), entry) {
                return Err(config_err(line, format!("{full} already set on line {}", prev.line)));
            }
        }
        Ok(Self { entries, used: RefCell::default() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Override (or add) a key; command-line flags win over the file.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), Entry { value: value.into(), line: 0 });
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn entry(&self, key: &str) -> Option<&Entry> {
        let e = self.entries.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(e)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entry(key).map(|e| e.value.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entry(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse()
                .map(Some)
                .map_err(|_| config_err(e.line, format!("{key}: cannot parse {:?}", e.value))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| config_err(0, format!("missing required key {key}")))
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.entry(key) {
            None => Ok(default),
            Some(e) => match e.value.to_ascii_lowercase().as_str() {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(config_err(e.line, format!("{key}: expected a boolean, got {:?}", e.value))),
            },
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        let Some(e) = self.entry(key) else { return Ok(None) };
        e.value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| config_err(e.line, format!("{key}: cannot parse list item {s:?}"))))
            .collect::<Result<Vec<_>>>()
            .and_then(|v| if v.is_empty() { Err(config_err(e.line, format!("{key}: empty list"))) } else { Ok(v) })
            .map(Some)
    }

    pub fn get_list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        Ok(self.get_list(key)?.unwrap_or(default))
    }

    /// Line of a key, for errors raised after parsing.
    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    /// Error on the first key (by line) nobody asked for.
    pub fn reject_unused(&self) -> Result<()> {
        let used = self.used.borrow();
        let mut unknown: Vec<_> = self.entries.iter().filter(|(k, _)| !used.contains(*k)).collect();
        unknown.sort_by_key(|(_, e)| e.line);
        match unknown.first() {
            Some((k, e)) => Err(config_err(e.line, format!("unknown key {k}"))),
            None => Ok(()),
        }
    }

    /// Canonical `key = value` dump, sorted by key.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, e)| format!("{k} = {}\n", e.value)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "
seed = 7   # master
[map]
kinds = rf, raf
n = 8,16 ,32
[pga]
step = 0.25
";

    #[test]
    fn sections_lists_and_scalars() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(c.get_list::<usize>("map.n").unwrap(), Some(vec![8, 16, 32]));
        assert_eq!(c.get_list::<String>("map.kinds").unwrap().unwrap(), ["rf", "raf"]);
        assert_eq!(c.get_or("pga.step", 1.0).unwrap(), 0.25);
        assert_eq!(c.get_or("pga.restarts", 10usize).unwrap(), 10);
        c.reject_unused().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Config::parse("a = 1\n[x\n").unwrap_err();
        assert!(matches!(e, WsError::Config { line: 2, .. }));
        let e = Config::parse("a = 1\nnonsense\n").unwrap_err();
        assert!(matches!(e, WsError::Config { line: 2, .. }));
        let e = Config::parse("a = 1\n\na = 2\n").unwrap_err();
        assert!(matches!(e, WsError::Config { line: 3, .. }));

        let c = Config::parse("[map]\nn = 8, x\n").unwrap();
        assert!(matches!(c.get_list::<usize>("map.n"), Err(WsError::Config { line: 2, .. })));
        let c = Config::parse("a = 1\n[pga]\nstpe = 2\n").unwrap();
        c.get::<u64>("a").unwrap();
        assert!(matches!(c.reject_unused(), Err(WsError::Config { line: 3, .. })));
    }

    #[test]
    fn overrides_win() {
        let mut c = Config::parse(SAMPLE).unwrap();
        c.set("seed", "9");
        assert_eq!(c.get::<u64>("seed").unwrap(), Some(9));
    }
}
