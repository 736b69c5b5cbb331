use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use iotx_core::Timestamp;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8700";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Real,
    /// Time only moves through `POST /v1/clock`; request `asOf` values are
    /// taken at face value.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub listen: String,
    pub default_capacity: u32,
    pub clock: ClockMode,
    /// Initial time of a manual clock.
    pub start: Option<Timestamp>,
    /// Holds `hub.jsonl` and the encrypted `keystore.bin`. In-memory when unset.
    pub data_dir: Option<PathBuf>,
    /// Extra filter definitions (JSON list).
    pub filters: Option<PathBuf>,
    /// Largest accepted difference between a request's `asOf` and the
    /// server clock, in seconds, in real clock mode.
    pub max_skew: i64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            listen: DEFAULT_LISTEN.into(),
            default_capacity: iotx_core::policy::DEFAULT_DEVICE_CAPACITY,
            clock: ClockMode::Real,
            start: None,
            data_dir: None,
            filters: None,
            max_skew: 300,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: &'static str, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl Config {
    /// Reads the TOML file (if any) and applies `IOTX_*` overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let file_err = |message: String| ConfigError::File {
                    path: p.to_owned(),
                    message,
                };
                let text = std::fs::read_to_string(p).map_err(|e| file_err(e.to_string()))?;
                let mut cfg: Config = toml::from_str(&text).map_err(|e| file_err(e.to_string()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                cfg.data_dir = cfg.data_dir.map(|d| base.join(d));
                cfg.filters = cfg.filters.map(|f| base.join(f));
                cfg
            }
            None => Config::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = get("IOTX_LISTEN") {
            self.listen = v;
        }
        if let Some(v) = get("IOTX_DEFAULT_CAPACITY") {
            self.default_capacity = v.parse().map_err(|_| ConfigError::Env {
                var: "IOTX_DEFAULT_CAPACITY",
                message: v.clone(),
            })?;
        }
        if let Some(v) = get("IOTX_CLOCK") {
            self.clock = match v.as_str() {
                "real" => ClockMode::Real,
                "manual" => ClockMode::Manual,
                _ => {
                    return Err(ConfigError::Env {
                        var: "IOTX_CLOCK",
                        message: format!("{v:?} is not real|manual"),
                    })
                }
            };
        }
        if let Some(v) = get("IOTX_DATA_DIR") {
            self.data_dir = Some(v.into());
        }
        if let Some(v) = get("IOTX_FILTERS") {
            self.filters = Some(v.into());
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), ConfigError> {
        if self.default_capacity == 0 {
            return Err(ConfigError::Invalid(
                "default_capacity must be at least 1".into(),
            ));
        }
        if self.max_skew < 0 {
            return Err(ConfigError::Invalid("max_skew must not be negative".into()));
        }
        Ok(())
    }
}
