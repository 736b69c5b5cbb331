use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{Did, IdentityError};
use crate::canonical::{canonical_string, canonicalize};
use crate::crypto::{PublicKey, Signature, Signer, VERIFICATION_METHOD};
use crate::time::Timestamp;

/// Registered connectivity types a device DID may bind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConnectivityType {
    EthernetMacAddress,
    WiFiMacAddress,
    LoRaDeviceEUI,
}

impl ConnectivityType {
    pub const ALL: [ConnectivityType; 3] = [
        ConnectivityType::EthernetMacAddress,
        ConnectivityType::WiFiMacAddress,
        ConnectivityType::LoRaDeviceEUI,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EthernetMacAddress => "EthernetMacAddress",
            Self::WiFiMacAddress => "WiFiMacAddress",
            Self::LoRaDeviceEUI => "LoRaDeviceEUI",
        }
    }

    /// Syntax rule for endpoints of this type.
    pub fn accepts(self, endpoint: &str) -> bool {
        match self {
            Self::EthernetMacAddress | Self::WiFiMacAddress => is_mac(endpoint),
            Self::LoRaDeviceEUI => endpoint.len() == 16 && endpoint.bytes().all(|b| b.is_ascii_hexdigit()),
        }
    }

    pub fn check(self, endpoint: &str) -> Result<(), IdentityError> {
        if self.accepts(endpoint) {
            Ok(())
        } else {
            Err(IdentityError::ServiceSyntax { kind: self, endpoint: endpoint.to_owned() })
        }
    }
}

fn is_mac(s: &str) -> bool {
    let octets: Vec<&str> = s.split(':').collect();
    octets.len() == 6 && octets.iter().all(|o| o.len() == 2 && o.bytes().all(|b| b.is_ascii_hexdigit()))
}

impl fmt::Display for ConnectivityType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConnectivityType {
    type Err = IdentityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| IdentityError::UnknownConnectivityType(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub id: Did,
    #[serde(rename = "type")]
    pub kind: ConnectivityType,
    #[serde(rename = "serviceEndpoint")]
    pub service_endpoint: String,
}

/// A signed DID document. `proof` is a self-signature by `public_key` over
/// the canonical bytes of every other field.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DidDocument {
    pub id: Did,
    pub public_key: PublicKey,
    pub verification_method: String,
    pub services: Vec<ServiceEntry>,
    pub created: Timestamp,
    pub proof: Signature,
}

/// Method-specific id for a self-certifying DID: lowercase hex of the first
/// 16 bytes of SHA-256(public key ‖ created), with `created` as 8 big-endian
/// bytes of Unix seconds.
pub fn derive_method_specific_id(public_key: &PublicKey, created: Timestamp) -> String {
    let mut h = Sha256::new();
    h.update(public_key.as_bytes());
    h.update(created.unix().to_be_bytes());
    hex::encode(&h.finalize()[..16])
}

fn unsigned_value(
    id: &Did,
    public_key: &PublicKey,
    verification_method: &str,
    services: &[ServiceEntry],
    created: Timestamp,
) -> Value {
    serde_json::json!({
        "id": id,
        "publicKey": public_key,
        "verificationMethod": verification_method,
        "services": services,
        "created": created,
    })
}

impl DidDocument {
    /// Builds and self-signs a document for `method`, deriving the id from
    /// the key and creation time. Does not persist anything.
    pub fn build(
        method: &str,
        signer: &dyn Signer,
        services: &[(ConnectivityType, String)],
        created: Timestamp,
    ) -> Result<Self, IdentityError> {
        let public_key = signer.public_key();
        let id = Did::new(method, &derive_method_specific_id(&public_key, created))?;
        let mut seen = Vec::with_capacity(services.len());
        let mut entries = Vec::with_capacity(services.len());
        for (kind, endpoint) in services {
            kind.check(endpoint)?;
            if seen.contains(kind) {
                return Err(IdentityError::DuplicateServiceType(*kind));
            }
            seen.push(*kind);
            entries.push(ServiceEntry { id: id.clone(), kind: *kind, service_endpoint: endpoint.clone() });
        }
        Self::sign(id, signer, entries, created)
    }

    /// Signs an arbitrary document body. Used for owner-controlled updates.
    pub fn sign(
        id: Did,
        signer: &dyn Signer,
        services: Vec<ServiceEntry>,
        created: Timestamp,
    ) -> Result<Self, IdentityError> {
        let public_key = signer.public_key();
        let body = unsigned_value(&id, &public_key, VERIFICATION_METHOD, &services, created);
        let bytes = canonicalize(&body).map_err(|e| IdentityError::Encoding(e.to_string()))?;
        let proof = signer.sign(&bytes).map_err(|e| IdentityError::Signing(e.to_string()))?;
        Ok(Self {
            id,
            public_key,
            verification_method: VERIFICATION_METHOD.to_owned(),
            services,
            created,
            proof,
        })
    }

    /// Canonical bytes covered by `proof`.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let body = unsigned_value(
            &self.id,
            &self.public_key,
            &self.verification_method,
            &self.services,
            self.created,
        );
        canonicalize(&body).expect("document fields are canonicalizable")
    }

    pub fn verify_proof_with(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.proof)
    }

    /// Checks the self-proof and the structural invariants.
    pub fn validate(&self) -> Result<(), IdentityError> {
        if self.verification_method != VERIFICATION_METHOD {
            return Err(IdentityError::UnsupportedVerificationMethod(self.verification_method.clone()));
        }
        let mut seen = Vec::with_capacity(self.services.len());
        for s in &self.services {
            if s.id != self.id {
                return Err(IdentityError::ServiceIdMismatch(s.id.clone()));
            }
            s.kind.check(&s.service_endpoint)?;
            if seen.contains(&s.kind) {
                return Err(IdentityError::DuplicateServiceType(s.kind));
            }
            seen.push(s.kind);
        }
        if !self.verify_proof_with(&self.public_key) {
            return Err(IdentityError::ProofInvalid);
        }
        Ok(())
    }

    pub fn service(&self, kind: ConnectivityType) -> Option<&ServiceEntry> {
        self.services.iter().find(|s| s.kind == kind)
    }

    pub fn to_canonical_string(&self) -> String {
        canonical_string(self).expect("document fields are canonicalizable")
    }
}
