//! Flat key-value configuration files.
//!
//! Grammar (documented in the README):
//!   - `# ...` comment lines and blank lines are ignored
//!   - `[section]` opens a section; keys inside become `section.key`
//!   - `key = value` assigns; values are bare strings, parsed on demand
//!   - duplicate keys are an error; unknown keys are rejected by consumers
//!
//! Overrides arrive as `section.key=value` pairs from the command line and
//! take precedence over file contents.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Config {
    /// `section.key` -> (value, source line; 0 for overrides/defaults).
    entries: BTreeMap<String, (String, usize)>,
    consumed: std::cell::RefCell<Vec<String>>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            let err = |msg: String| Error::Config { line: line_no, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?
                    .trim();
                if !valid_key(name) || name.contains('.') {
                    return Err(err(format!("invalid section name '{name}'")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            let key = key.trim();
            let value = value.trim();
            if !valid_key(key) || key.contains('.') {
                return Err(err(format!("invalid key '{key}'")));
            }
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if entries.insert(full.clone(), (value.to_string(), line_no)).is_some() {
                return Err(err(format!("duplicate key '{full}'")));
            }
        }
        Ok(Config {
            entries,
            consumed: Default::default(),
        })
    }

    /// Applies `section.key=value` command-line overrides on top of the file.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for (i, ov) in overrides.iter().enumerate() {
            let err = |msg: String| Error::Config { line: 0, msg: format!("override {}: {msg}", i + 1) };
            let (key, value) = ov
                .split_once('=')
                .ok_or_else(|| err("expected section.key=value".into()))?;
            let key = key.trim();
            if !valid_key(key) {
                return Err(err(format!("invalid key '{key}'")));
            }
            self.entries.insert(key.to_string(), (value.trim().to_string(), 0));
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(|(v, _)| v.as_str());
        if v.is_some() {
            self.consumed.borrow_mut().push(key.to_string());
        }
        v
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map(|(_, l)| *l).unwrap_or(0)
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.get(key).unwrap_or(default).to_string()
    }

    pub fn get_u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("key '{key}': expected integer, got '{v}'"),
            }),
        }
    }

    pub fn get_usize(&self, key: &str, default: usize) -> Result<usize> {
        Ok(self.get_u64(key, default as u64)? as usize)
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| Error::Config {
                line: self.line_of(key),
                msg: format!("key '{key}': expected number, got '{v}'"),
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config {
                line: self.line_of(key),
                msg: format!("key '{key}': expected true/false, got '{v}'"),
            }),
        }
    }

    /// Errors on any key that no consumer read; call after all gets.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (key, (_, line)) in &self.entries {
            if !consumed.iter().any(|c| c == key) {
                return Err(Error::Config {
                    line: *line,
                    msg: format!("unknown key '{key}'"),
                });
            }
        }
        Ok(())
    }

    /// Serializes grouped by section, suitable for re-parsing; used to write
    /// the effective config next to run outputs.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut current_section = String::new();
        let mut first = true;
        for (key, (value, _)) in &self.entries {
            let (section, short) = match key.split_once('.') {
                Some((s, k)) => (s.to_string(), k.to_string()),
                None => (String::new(), key.clone()),
            };
            if section != current_section {
                if !first {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current_section = section;
            }
            first = false;
            out.push_str(&format!("{short} = {value}\n"));
        }
        out
    }

    /// Inserts a value programmatically (used when writing effective configs).
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }
}
