//! Flat `key = value` configuration files.
//!
//! One format serves three places: config files passed to the CLI, the
//! canonical config echo at the start of a run, and the config block embedded
//! in checkpoints. Typed getters consume keys as they read them; `finish`
//! rejects anything left over, so a typo'd key fails loudly instead of
//! silently falling back to a default.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Parse { line: usize, text: String },
    #[error("duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("key `{key}`: expected {expected}, got `{value}`")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("unknown config key(s): {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("missing required key `{0}`")]
    MissingKey(String),
}

/// Parsed key/value pairs with consumption tracking.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    values: BTreeMap<String, String>,
    consumed: BTreeSet<String>,
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` starts a comment, blank lines are fine.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = KvConfig::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    text: raw.trim().to_string(),
                });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(ConfigError::Parse {
                    line: i + 1,
                    text: raw.trim().to_string(),
                });
            }
            if cfg.values.contains_key(&key) {
                return Err(ConfigError::DuplicateKey(key));
            }
            cfg.values.insert(key, v.trim().to_string());
        }
        Ok(cfg)
    }

    /// Set or override one pair (CLI `--set key=value`).
    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.trim().to_string(), value.trim().to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.consumed.insert(key.to_string());
        self.values.get(key).cloned()
    }

    pub fn get_str(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    pub fn require_str(&mut self, key: &str) -> Result<String, ConfigError> {
        self.take(key).ok_or_else(|| ConfigError::MissingKey(key.to_string()))
    }

    fn parsed<T: std::str::FromStr>(
        &mut self,
        key: &str,
        default: T,
        expected: &'static str,
    ) -> Result<T, ConfigError> {
        match self.take(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: v,
                expected,
            }),
        }
    }

    pub fn get_f64(&mut self, key: &str, default: f64) -> Result<f64, ConfigError> {
        self.parsed(key, default, "a number")
    }

    pub fn get_usize(&mut self, key: &str, default: usize) -> Result<usize, ConfigError> {
        self.parsed(key, default, "a non-negative integer")
    }

    pub fn get_u64(&mut self, key: &str, default: u64) -> Result<u64, ConfigError> {
        self.parsed(key, default, "a non-negative integer")
    }

    /// Booleans are written `true`/`false`.
    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.take(key).as_deref() {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(ConfigError::BadValue {
                key: key.to_string(),
                value: v.to_string(),
                expected: "true or false",
            }),
        }
    }

    /// Comma-separated list of non-negative integers, e.g. `8,16,32,32`.
    pub fn get_usize_list(
        &mut self,
        key: &str,
        default: &[usize],
    ) -> Result<Vec<usize>, ConfigError> {
        match self.take(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v,
                    expected: "a comma-separated integer list",
                }),
        }
    }

    /// Error out if any key was never consumed by a getter.
    pub fn finish(self) -> Result<(), ConfigError> {
        let unknown: Vec<String> = self
            .values
            .keys()
            .filter(|k| !self.consumed.contains(*k))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown))
        }
    }
}

/// Canonical text form: sorted `key = value` lines, one per pair.
pub fn canonical(pairs: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(k);
        out.push_str(" = ");
        out.push_str(v);
        out.push('\n');
    }
    out
}

/// Join a usize list back into config syntax.
pub fn usize_list_to_string(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_blanks_and_pairs() {
        let mut cfg = KvConfig::parse(
            "# header\nlr = 0.001\n\nbatch_size= 8  # trailing\nconv_channels = 8,16,32,32\n",
        )
        .unwrap();
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 0.001);
        assert_eq!(cfg.get_usize("batch_size", 0).unwrap(), 8);
        assert_eq!(
            cfg.get_usize_list("conv_channels", &[]).unwrap(),
            vec![8, 16, 32, 32]
        );
        cfg.finish().unwrap();
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let mut cfg = KvConfig::parse("lr = 0.1\nlearning_rate = 0.2\n").unwrap();
        let _ = cfg.get_f64("lr", 0.0).unwrap();
        let err = cfg.finish().unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "got: {err}");
    }

    #[test]
    fn bad_value_is_named_with_key() {
        let mut cfg = KvConfig::parse("epochs = three\n").unwrap();
        let err = cfg.get_usize("epochs", 1).unwrap_err();
        assert!(err.to_string().contains("epochs"));
        assert!(err.to_string().contains("three"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KvConfig::parse("lr = 0.1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(matches!(
            KvConfig::parse("a = 1\na = 2\n"),
            Err(ConfigError::DuplicateKey(_))
        ));
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut cfg = KvConfig::parse("lr = 0.1\n").unwrap();
        cfg.set("lr", "0.5");
        assert_eq!(cfg.get_f64("lr", 0.0).unwrap(), 0.5);
    }

    #[test]
    fn canonical_form_is_sorted_and_stable() {
        let mut pairs = BTreeMap::new();
        pairs.insert("b".to_string(), "2".to_string());
        pairs.insert("a".to_string(), "1".to_string());
        assert_eq!(canonical(&pairs), "a = 1\nb = 2\n");
    }
}
