//! Flag resolution: command-line flags win over the JSON config file, which
//! wins over built-in defaults. `DSPR_SEED` overrides every other seed source.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

pub const SEED_ENV: &str = "DSPR_SEED";

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default)]
pub struct Settings {
    file: Map<String, Value>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let Value::Object(obj) = value else {
            return Err(usage(format!("config {} must hold a JSON object", path.display())));
        };
        // accept both `d_model` and `d-model`
        let file = obj.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
        Ok(Self { file })
    }

    #[cfg(test)]
    pub fn from_value(value: Value) -> Self {
        match value {
            Value::Object(file) => Self { file },
            _ => Self::default(),
        }
    }

    /// Flag value if given, else the config file entry under `key`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| serde_json::from_value(v.clone()).map_err(|e| usage(format!("config key '{key}': {e}"))))
            .transpose()
    }

    pub fn get<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.pick(flag, key)?
            .ok_or_else(|| usage(format!("missing required --{}", key.replace('_', "-"))))
    }

    pub fn switch(&self, flag: bool, key: &str) -> Result<bool> {
        Ok(flag || self.get(None, key, false)?)
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        self.seed_with_env(flag, std::env::var(SEED_ENV).ok())
    }

    fn seed_with_env(&self, flag: Option<u64>, env: Option<String>) -> Result<u64> {
        if let Some(raw) = env {
            return raw
                .trim()
                .parse()
                .map_err(|_| usage(format!("{SEED_ENV}='{raw}' is not an unsigned integer")));
        }
        self.get(flag, "seed", 0)
    }
}
