//! Decentralized identifiers: syntax, self-signed documents, method
//! plugins and the identity hub that stores document revisions.

mod did;
mod document;
mod hub;
mod resolver;

use thiserror::Error;

pub use did::{parse_did, Did};
pub use document::{derive_method_specific_id, ConnectivityType, DidDocument, ServiceEntry};
pub use hub::{IdentityHub, Revision};
pub use resolver::{DidResolver, HubPlugin, MethodPlugin, Resolver, ResolverBuilder};

/// Method served by the exchange's own hub.
pub const LOCAL_METHOD: &str = "iotx";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdentityError {
    #[error("malformed DID {0}")]
    MalformedDid(String),
    #[error("no plugin for DID method {0:?}")]
    UnknownMethod(String),
    #[error("{0} not found")]
    NotFound(Did),
    #[error("unknown connectivity type {0:?}")]
    UnknownConnectivityType(String),
    #[error("{endpoint:?} is not a valid {kind} endpoint")]
    ServiceSyntax { kind: ConnectivityType, endpoint: String },
    #[error("more than one {0} service")]
    DuplicateServiceType(ConnectivityType),
    #[error("service entry id {0} differs from document id")]
    ServiceIdMismatch(Did),
    #[error("unsupported verification method {0:?}")]
    UnsupportedVerificationMethod(String),
    #[error("document proof does not verify")]
    ProofInvalid,
    #[error("update to {0} not signed by its current key")]
    UpdateUnauthorized(Did),
    #[error("{0} is not derived from its key and creation time")]
    NotSelfCertifying(Did),
    #[error("signer does not hold the given public key")]
    SignerMismatch,
    #[error("plugin for method {0:?} registered twice")]
    DuplicateMethod(String),
    #[error("encoding: {0}")]
    Encoding(String),
    #[error("signing: {0}")]
    Signing(String),
    #[error("persistence: {0}")]
    Persistence(String),
    #[error("resolver unavailable: {0}")]
    Unavailable(String),
}

impl IdentityError {
    pub fn token(&self) -> &'static str {
        match self {
            Self::MalformedDid(_) => "MalformedDid",
            Self::UnknownMethod(_) => "UnknownMethod",
            Self::NotFound(_) => "NotFound",
            Self::UnknownConnectivityType(_) => "UnknownConnectivityType",
            Self::ServiceSyntax { .. } => "ServiceSyntaxError",
            Self::DuplicateServiceType(_) => "DuplicateServiceType",
            Self::ServiceIdMismatch(_) => "ServiceIdMismatch",
            Self::UnsupportedVerificationMethod(_) => "UnsupportedVerificationMethod",
            Self::ProofInvalid => "ProofInvalid",
            Self::UpdateUnauthorized(_) => "UpdateUnauthorized",
            Self::NotSelfCertifying(_) => "NotSelfCertifying",
            Self::SignerMismatch => "SignerMismatch",
            Self::DuplicateMethod(_) => "DuplicateMethod",
            Self::Encoding(_) => "Encoding",
            Self::Signing(_) => "Signing",
            Self::Persistence(_) => "Persistence",
            Self::Unavailable(_) => "Unavailable",
        }
    }
}
