use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use super::IdentityError;

/// A decentralized identifier, `did:<method>:<method-specific-id>`.
///
/// The method is lowercase alphanumerics. The method-specific id is nonempty
/// and drawn from `[A-Za-z0-9._:%-]`, and may not end in `:`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Did {
    text: String,
    method_len: usize,
}

impl Did {
    pub fn parse(text: &str) -> Result<Self, IdentityError> {
        let malformed = |why: &str| IdentityError::MalformedDid(format!("{text:?}: {why}"));
        let rest = text.strip_prefix("did:").ok_or_else(|| malformed("missing did: prefix"))?;
        let (method, id) = rest.split_once(':').ok_or_else(|| malformed("missing method-specific id"))?;
        if method.is_empty() {
            return Err(malformed("empty method"));
        }
        if !method.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()) {
            return Err(malformed("illegal method characters"));
        }
        if id.is_empty() {
            return Err(malformed("empty method-specific id"));
        }
        if !id.bytes().all(is_id_char) || id.ends_with(':') {
            return Err(malformed("illegal method-specific id"));
        }
        Ok(Self { text: text.to_owned(), method_len: method.len() })
    }

    /// Builds a DID from its parts, validating both.
    pub fn new(method: &str, method_specific_id: &str) -> Result<Self, IdentityError> {
        Self::parse(&format!("did:{method}:{method_specific_id}"))
    }

    pub fn method(&self) -> &str {
        &self.text[4..4 + self.method_len]
    }

    pub fn method_specific_id(&self) -> &str {
        &self.text[5 + self.method_len..]
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

fn is_id_char(b: u8) -> bool {
    b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-' | b'_' | b':' | b'%')
}

/// Parses DID text; see [`Did::parse`].
pub fn parse_did(text: &str) -> Result<Did, IdentityError> {
    Did::parse(text)
}

impl fmt::Display for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

impl fmt::Debug for Did {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Did({})", self.text)
    }
}

impl FromStr for Did {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl Serialize for Did {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.text)
    }
}

impl<'de> Deserialize<'de> for Did {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::parse(&s).map_err(de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_exemplar() {
        let did = parse_did("did:example:1234567890abcdefg").unwrap();
        assert_eq!(did.method(), "example");
        assert_eq!(did.method_specific_id(), "1234567890abcdefg");
    }

    #[test]
    fn minimal_form() {
        let did = parse_did("did:iotx:x").unwrap();
        assert_eq!((did.method(), did.method_specific_id()), ("iotx", "x"));
    }

    #[test]
    fn colons_inside_id() {
        let did = parse_did("did:web:example.com:user:alice").unwrap();
        assert_eq!(did.method(), "web");
        assert_eq!(did.method_specific_id(), "example.com:user:alice");
    }

    #[test]
    fn malformed() {
        for bad in [
            "example:1234",
            "did::abc",
            "did:iotx:",
            "did:iotx",
            "did:IOTX:abc",
            "did:io-tx:abc",
            "did:iotx:a b",
            "did:iotx:abc:",
            "DID:iotx:abc",
            "",
        ] {
            assert!(matches!(parse_did(bad), Err(IdentityError::MalformedDid(_))), "{bad}");
        }
    }

    proptest! {
        #[test]
        fn parse_serialize_round_trip(
            method in "[a-z0-9]{1,8}",
            id in "[A-Za-z0-9._%-]{1,6}(:[A-Za-z0-9._%-]{1,6}){0,2}",
        ) {
            let text = format!("did:{method}:{id}");
            let did = parse_did(&text).unwrap();
            prop_assert_eq!(did.to_string(), text.clone());
            prop_assert_eq!(did.method(), method.as_str());
            prop_assert_eq!(did.method_specific_id(), id.as_str());
            let json = serde_json::to_string(&did).unwrap();
            prop_assert_eq!(serde_json::from_str::<Did>(&json).unwrap(), did);
        }
    }
}
