//! Key-value run configuration files.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, blank
//! lines ignored. Keys are dotted (`train.epochs`, `gen.seed`). Typed
//! accessors mark keys as consumed so unknown keys can be reported with
//! their line numbers.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("config line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("config line {line}: `{key}` expects {expected}, got `{got}`")]
    BadValue {
        key: String,
        line: usize,
        expected: &'static str,
        got: String,
    },
    #[error("config field `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("config line {line}: unknown key `{key}`")]
    Unknown { key: String, line: usize },
}

#[derive(Debug, Clone)]
struct Entry {
    value: String,
    line: usize,
    consumed: bool,
}

/// Parsed configuration file with consumption tracking.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: HashMap<String, Entry>,
}

impl ConfigMap {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = HashMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let stripped = stripped.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Syntax { line });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if entries.contains_key(&key) {
                return Err(ConfigError::Duplicate { key, line });
            }
            entries.insert(
                key,
                Entry {
                    value,
                    line,
                    consumed: false,
                },
            );
        }
        Ok(ConfigMap { entries })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.get_mut(key).map(|e| {
            e.consumed = true;
            (e.value.clone(), e.line)
        })
    }

    pub fn str_or(&mut self, key: &str, default: &str) -> String {
        self.take(key)
            .map_or_else(|| default.to_string(), |(v, _)| v)
    }

    pub fn f64_or(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                line,
                expected: "a number",
                got: v,
            }),
        }
    }

    pub fn usize_or(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                line,
                expected: "a non-negative integer",
                got: v,
            }),
        }
    }

    pub fn u64_or(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                line,
                expected: "a non-negative integer",
                got: v,
            }),
        }
    }

    pub fn bool_or(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(ConfigError::BadValue {
                    key: key.to_string(),
                    line,
                    expected: "true or false",
                    got: v,
                }),
            },
        }
    }

    /// Error on the first key no accessor asked for.
    pub fn ensure_consumed(&self) -> Result<(), ConfigError> {
        self.ensure_consumed_sections(&[], &[])
    }

    /// Section-scoped check for configs shared across commands: unconsumed
    /// keys inside `own` sections are errors (typos in the caller's own
    /// namespace), as are keys outside every `known` section. Keys in
    /// foreign known sections are left for other commands.
    pub fn ensure_consumed_sections(
        &self,
        own: &[&str],
        known: &[&str],
    ) -> Result<(), ConfigError> {
        let mut unknown: Vec<(&String, &Entry)> = self
            .entries
            .iter()
            .filter(|(key, e)| {
                if e.consumed {
                    return false;
                }
                let in_own = own.iter().any(|p| key.starts_with(p));
                let in_known = known.iter().any(|p| key.starts_with(p));
                in_own || !in_known
            })
            .collect();
        unknown.sort_by_key(|(_, e)| e.line);
        match unknown.first() {
            Some((key, e)) => Err(ConfigError::Unknown {
                key: (*key).clone(),
                line: e.line,
            }),
            None => Ok(()),
        }
    }
}

/// Validation helper: field must be finite and >= 0.
pub fn require_non_negative(key: &str, value: f64) -> Result<f64, ConfigError> {
    if !value.is_finite() || value < 0.0 {
        return Err(ConfigError::Invalid {
            key: key.to_string(),
            reason: format!("must be >= 0, got {value}"),
        });
    }
    Ok(value)
}
