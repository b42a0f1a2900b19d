//! Flat key-value configuration with dotted section keys.
//!
//! The file format is one `key = value` pair per line; `#` starts a comment;
//! blank lines are ignored. Command-line flags override file values, and
//! defaults fill the rest. The fully resolved map is echoed into every
//! output header together with its hash, so a report always records the
//! exact configuration that produced it.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Fully resolved configuration: every effective key, sorted.
#[derive(Debug, Clone, Default)]
pub struct ResolvedConfig {
    values: BTreeMap<String, String>,
}

/// Parses a config file into raw key-value pairs.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config `{}`: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "config line {}: expected `key = value`, got `{raw_line}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(CliError::config(format!("config line {}: empty key", lineno + 1)));
        }
        if out.insert(key.clone(), value).is_some() {
            return Err(CliError::config(format!(
                "config line {}: duplicate key `{key}`",
                lineno + 1
            )));
        }
    }
    Ok(out)
}

impl ResolvedConfig {
    /// Builds the effective configuration: defaults, then file values, then
    /// flag overrides, in increasing precedence.
    pub fn resolve(
        defaults: &[(&str, String)],
        file: BTreeMap<String, String>,
        overrides: Vec<(String, String)>,
    ) -> Self {
        let mut values: BTreeMap<String, String> = defaults
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        values.extend(file);
        values.extend(overrides);
        Self { values }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| CliError::config(format!("missing required configuration key `{key}`")))
    }

    pub fn get_f64(&self, key: &str) -> Result<Option<f64>> {
        self.get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    CliError::config(format!("configuration `{key}` must be a number, got `{v}`"))
                })
            })
            .transpose()
    }

    pub fn get_usize(&self, key: &str) -> Result<Option<usize>> {
        self.get(key)
            .map(|v| {
                v.parse::<usize>().map_err(|_| {
                    CliError::config(format!("configuration `{key}` must be an integer, got `{v}`"))
                })
            })
            .transpose()
    }

    pub fn get_u64(&self, key: &str) -> Result<Option<u64>> {
        self.get(key)
            .map(|v| {
                v.parse::<u64>().map_err(|_| {
                    CliError::config(format!("configuration `{key}` must be an integer, got `{v}`"))
                })
            })
            .transpose()
    }

    pub fn get_bool(&self, key: &str) -> Result<Option<bool>> {
        self.get(key)
            .map(|v| match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(CliError::config(format!(
                    "configuration `{key}` must be a boolean, got `{other}`"
                ))),
            })
            .transpose()
    }

    /// Keys under `schema.categorical.`: (covariate name, levels).
    pub fn categorical_declarations(&self) -> Vec<(String, Vec<String>)> {
        self.values
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix("schema.categorical.").map(|name| {
                    (
                        name.to_string(),
                        v.split(',').map(|s| s.trim().to_string()).collect(),
                    )
                })
            })
            .collect()
    }

    /// Sorted `key = value` lines for the output header.
    pub fn echo_lines(&self) -> Vec<String> {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}"))
            .collect()
    }

    /// Hash of the resolved configuration (first 16 hex digits of SHA-256
    /// over the sorted key-value listing).
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for line in self.echo_lines() {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_flags_override_files() {
        let mut file = BTreeMap::new();
        file.insert("a".to_string(), "file".to_string());
        file.insert("b".to_string(), "file".to_string());
        let resolved = ResolvedConfig::resolve(
            &[("a", "default".to_string()), ("c", "default".to_string())],
            file,
            vec![("b".to_string(), "flag".to_string())],
        );
        assert_eq!(resolved.get("a"), Some("file"));
        assert_eq!(resolved.get("b"), Some("flag"));
        assert_eq!(resolved.get("c"), Some("default"));
    }

    #[test]
    fn hash_changes_with_values() {
        let a = ResolvedConfig::resolve(&[("k", "1".to_string())], BTreeMap::new(), vec![]);
        let b = ResolvedConfig::resolve(&[("k", "2".to_string())], BTreeMap::new(), vec![]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn parse_rejects_duplicates_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.conf");
        std::fs::write(&path, "a = 1\n# comment\n\na = 2\n").unwrap();
        assert!(parse_config_file(&path).is_err());
        std::fs::write(&path, "just words\n").unwrap();
        assert!(parse_config_file(&path).is_err());
        std::fs::write(&path, "sampler.chains = 4 # inline comment\n").unwrap();
        let parsed = parse_config_file(&path).unwrap();
        assert_eq!(parsed.get("sampler.chains").map(|s| s.as_str()), Some("4"));
    }
}
