//! Named field-level privacy filters, applied one after another to data
//! flowing out of devices and to commands flowing into them.

use std::collections::BTreeMap;
use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::telemetry::{FieldValue, Fields, TelemetryRecord};

/// Value written over redacted fields.
pub const REDACTED: &str = "***";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PrivacyError {
    #[error("unknown filter {0:?}")]
    UnknownFilter(String),
    #[error("filter {0:?} would shadow a built-in")]
    ShadowsBuiltin(String),
    #[error("filter {0:?} defined twice")]
    DuplicateFilter(String),
    #[error("filter {0:?} has no target fields")]
    NoTargets(String),
    #[error("bad filter config: {0}")]
    Config(String),
}

/// An exact field name, or a prefix pattern written `geo.*`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldPattern {
    Exact(String),
    Prefix(String),
}

impl FieldPattern {
    pub fn parse(text: &str) -> Result<Self, PrivacyError> {
        if text.is_empty() {
            return Err(PrivacyError::Config("empty field pattern".into()));
        }
        match text.strip_suffix('*') {
            Some(prefix) if !prefix.contains('*') => Ok(Self::Prefix(prefix.to_owned())),
            Some(_) => Err(PrivacyError::Config(format!("bad field pattern {text:?}"))),
            None if text.contains('*') => Err(PrivacyError::Config(format!("bad field pattern {text:?}"))),
            None => Ok(Self::Exact(text.to_owned())),
        }
    }

    pub fn matches(&self, field: &str) -> bool {
        match self {
            Self::Exact(name) => name == field,
            Self::Prefix(prefix) => field.starts_with(prefix.as_str()),
        }
    }
}

impl fmt::Display for FieldPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Exact(n) => f.write_str(n),
            Self::Prefix(p) => write!(f, "{p}*"),
        }
    }
}

impl Serialize for FieldPattern {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldPattern {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterMode {
    /// Replace the value with `"***"`.
    Redact,
    /// Remove the field.
    Drop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FilterDef {
    pub name: String,
    pub target_fields: Vec<FieldPattern>,
    pub mode: FilterMode,
}

impl FilterDef {
    pub fn new(name: &str, targets: &[&str], mode: FilterMode) -> Self {
        Self {
            name: name.to_owned(),
            target_fields: targets.iter().map(|t| FieldPattern::parse(t).expect("valid pattern")).collect(),
            mode,
        }
    }

    pub fn targets(&self, field: &str) -> bool {
        self.target_fields.iter().any(|p| p.matches(field))
    }

    /// Applies the filter to a bare field map.
    pub fn apply_fields(&self, fields: &Fields) -> Fields {
        let mut out = Fields::new();
        for (name, value) in fields {
            if !self.targets(name) {
                out.insert(name.clone(), value.clone());
            } else if self.mode == FilterMode::Redact {
                out.insert(name.clone(), FieldValue::Text(REDACTED.to_owned()));
            }
        }
        out
    }
}

/// Runs one filter over a record. Device and timestamp pass through.
pub fn apply_filter(filter: &FilterDef, record: &TelemetryRecord) -> TelemetryRecord {
    TelemetryRecord {
        device_did: record.device_did.clone(),
        timestamp: record.timestamp,
        fields: filter.apply_fields(&record.fields),
    }
}

pub fn builtin_filters() -> Vec<FilterDef> {
    vec![
        FilterDef::new("redact_location", &["lat", "lon", "location"], FilterMode::Redact),
        FilterDef::new("redact_device_id", &["loraId", "macAddress", "deviceSerial"], FilterMode::Redact),
    ]
}

/// Registry of filters by name: the built-ins plus any configured extras.
#[derive(Debug, Clone)]
pub struct FilterRegistry {
    filters: BTreeMap<String, FilterDef>,
}

impl Default for FilterRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl FilterRegistry {
    pub fn builtin() -> Self {
        Self { filters: builtin_filters().into_iter().map(|f| (f.name.clone(), f)).collect() }
    }

    /// Adds filters from config. Built-in names cannot be redefined.
    pub fn extend(&mut self, defs: Vec<FilterDef>) -> Result<(), PrivacyError> {
        let builtins: Vec<String> = builtin_filters().into_iter().map(|f| f.name).collect();
        let mut staged = self.filters.clone();
        for def in defs {
            if builtins.contains(&def.name) {
                return Err(PrivacyError::ShadowsBuiltin(def.name));
            }
            if def.target_fields.is_empty() {
                return Err(PrivacyError::NoTargets(def.name));
            }
            if staged.contains_key(&def.name) {
                return Err(PrivacyError::DuplicateFilter(def.name));
            }
            staged.insert(def.name.clone(), def);
        }
        self.filters = staged;
        Ok(())
    }

    /// Parses the config format: a JSON list of `{name, targetFields, mode}`.
    pub fn extend_from_json(&mut self, text: &str) -> Result<(), PrivacyError> {
        let defs: Vec<FilterDef> = serde_json::from_str(text).map_err(|e| PrivacyError::Config(e.to_string()))?;
        self.extend(defs)
    }

    pub fn get(&self, name: &str) -> Result<&FilterDef, PrivacyError> {
        self.filters.get(name).ok_or_else(|| PrivacyError::UnknownFilter(name.to_owned()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.filters.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.filters.keys().map(String::as_str)
    }

    /// Checks every name in a chain is registered.
    pub fn check_chain<S: AsRef<str>>(&self, chain: &[S]) -> Result<(), PrivacyError> {
        chain.iter().try_for_each(|n| self.get(n.as_ref()).map(|_| ()))
    }

    /// Left fold of the named filters over a record.
    pub fn apply_chain<S: AsRef<str>>(
        &self,
        chain: &[S],
        record: &TelemetryRecord,
    ) -> Result<TelemetryRecord, PrivacyError> {
        self.check_chain(chain)?;
        Ok(TelemetryRecord {
            device_did: record.device_did.clone(),
            timestamp: record.timestamp,
            fields: self.apply_chain_fields(chain, &record.fields)?,
        })
    }

    /// Same fold over a bare field map, as used for control commands.
    pub fn apply_chain_fields<S: AsRef<str>>(&self, chain: &[S], fields: &Fields) -> Result<Fields, PrivacyError> {
        let mut out = fields.clone();
        for name in chain {
            out = self.get(name.as_ref())?.apply_fields(&out);
        }
        Ok(out)
    }
}
