//! Telemetry records: one timestamped reading from one device as a flat map
//! of named fields. Decimal readings are carried as strings.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::canonical::canonicalize_serialize;
use crate::crypto::{PublicKey, Signature, Signer, SignError};
use crate::identity::Did;
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldValue {
    Text(String),
    Integer(i64),
}

impl From<&str> for FieldValue {
    fn from(s: &str) -> Self {
        Self::Text(s.to_owned())
    }
}

impl From<String> for FieldValue {
    fn from(s: String) -> Self {
        Self::Text(s)
    }
}

impl From<i64> for FieldValue {
    fn from(i: i64) -> Self {
        Self::Integer(i)
    }
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Text(s) => f.write_str(s),
            Self::Integer(i) => write!(f, "{i}"),
        }
    }
}

pub type Fields = BTreeMap<String, FieldValue>;

/// Builds a field map from `(name, value)` pairs.
pub fn fields<I, K, V>(pairs: I) -> Fields
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<FieldValue>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TelemetryRecord {
    pub device_did: Did,
    pub timestamp: Timestamp,
    pub fields: Fields,
}

impl TelemetryRecord {
    pub fn has_valid_field_names(&self) -> bool {
        self.fields.keys().all(|k| !k.is_empty())
    }

    /// Canonical bytes a device signs.
    pub fn signing_bytes(&self) -> Vec<u8> {
        canonicalize_serialize(self).expect("records hold no floats")
    }

    pub fn sign(self, signer: &dyn Signer) -> Result<SignedRecord, SignError> {
        let signature = signer.sign(&self.signing_bytes())?;
        Ok(SignedRecord { record: self, signature })
    }
}

/// A record with the device's signature. On the wire the record fields and
/// `signature` (hex) sit side by side in one object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedRecord {
    #[serde(flatten)]
    pub record: TelemetryRecord,
    pub signature: Signature,
}

impl SignedRecord {
    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.record.signing_bytes(), &self.signature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::LocalSigner;

    fn record() -> TelemetryRecord {
        TelemetryRecord {
            device_did: Did::parse("did:iotx:abc").unwrap(),
            timestamp: Timestamp::from_unix(1_600_000_000),
            fields: fields([("temp", FieldValue::from("22.5")), ("count", FieldValue::from(3))]),
        }
    }

    #[test]
    fn wire_form() {
        let s = LocalSigner::from_seed([1; 32]);
        let signed = record().sign(&s).unwrap();
        let v = serde_json::to_value(&signed).unwrap();
        assert_eq!(v["deviceDid"], "did:iotx:abc");
        assert_eq!(v["timestamp"], "2020-09-13T12:26:40Z");
        assert_eq!(v["fields"]["temp"], "22.5");
        assert_eq!(v["fields"]["count"], 3);
        assert_eq!(v["signature"].as_str().unwrap().len(), 128);
        let back: SignedRecord = serde_json::from_value(v).unwrap();
        assert_eq!(back, signed);
        assert!(back.verify(&s.public_key()));
    }

    #[test]
    fn float_fields_rejected_on_input() {
        let text = r#"{"deviceDid":"did:iotx:abc","timestamp":"2020-09-13T12:26:40Z","fields":{"temp":22.5}}"#;
        assert!(serde_json::from_str::<TelemetryRecord>(text).is_err());
    }

    #[test]
    fn tampering_breaks_signature() {
        let s = LocalSigner::from_seed([1; 32]);
        let mut signed = record().sign(&s).unwrap();
        signed.record.fields.insert("temp".into(), "99.9".into());
        assert!(!signed.verify(&s.public_key()));
    }
}
