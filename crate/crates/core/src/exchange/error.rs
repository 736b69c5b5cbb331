use thiserror::Error;

use crate::credential::VerifyFailure;
use crate::identity::{ConnectivityType, Did, IdentityError};
use crate::keystore::KeystoreError;
use crate::policy::PolicyError;

/// A typed rejection carried over the wire as `{"error": token, "step": n}`.
pub trait Reason: std::error::Error {
    fn token(&self) -> &'static str;
    fn step(&self) -> u8;
    /// True for faults of the exchange itself rather than of the request.
    fn is_internal(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegisterError {
    #[error("{kind} {id} already registered")]
    DuplicateConnectivityId { kind: ConnectivityType, id: String },
    #[error("device serial {0:?} already registered")]
    DuplicateSerial(String),
    #[error("owner {0} cannot be resolved")]
    OwnerUnresolvable(Did),
    #[error(transparent)]
    Identity(IdentityError),
    #[error(transparent)]
    Keystore(KeystoreError),
}

impl Reason for RegisterError {
    fn token(&self) -> &'static str {
        match self {
            Self::DuplicateConnectivityId { .. } => "DuplicateConnectivityId",
            Self::DuplicateSerial(_) => "DuplicateSerial",
            Self::OwnerUnresolvable(_) => "OwnerUnresolvable",
            Self::Identity(e) => e.token(),
            Self::Keystore(_) => "KeystoreFailure",
        }
    }

    fn step(&self) -> u8 {
        match self {
            Self::DuplicateConnectivityId { .. } | Self::OwnerUnresolvable(_) => 1,
            Self::Identity(IdentityError::ServiceSyntax { .. }) => 1,
            _ => 2,
        }
    }

    fn is_internal(&self) -> bool {
        matches!(self, Self::Keystore(_) | Self::Identity(IdentityError::Persistence(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VcIdError {
    #[error("owner {0} cannot be resolved")]
    OwnerUnresolvable(Did),
}

impl Reason for VcIdError {
    fn token(&self) -> &'static str {
        "OwnerUnresolvable"
    }

    fn step(&self) -> u8 {
        1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PresentError {
    #[error("credential verification failed: {0}")]
    VerificationFailed(VerifyFailure),
    #[error("customer {0} cannot be resolved")]
    CustomerUnresolvable(Did),
    #[error("device {0} is not registered to the issuer")]
    DeviceNotOwnedByIssuer(Did),
    #[error("credential id was not minted by this exchange")]
    UnknownVcId,
    #[error("credential id already used")]
    VcIdAlreadyUsed,
    #[error("credential id was minted for a different owner")]
    VcIdIssuerMismatch,
    #[error("device {0} is at capacity")]
    CapacityExceeded(Did),
}

impl PresentError {
    /// Detail for verification failures.
    pub fn reason(&self) -> Option<&'static str> {
        match self {
            Self::VerificationFailed(f) => Some(f.token()),
            _ => None,
        }
    }
}

impl Reason for PresentError {
    fn token(&self) -> &'static str {
        match self {
            Self::VerificationFailed(_) => "VerificationFailed",
            Self::CustomerUnresolvable(_) => "CustomerUnresolvable",
            Self::DeviceNotOwnedByIssuer(_) => "DeviceNotOwnedByIssuer",
            Self::UnknownVcId => "UnknownVcId",
            Self::VcIdAlreadyUsed => "VcIdAlreadyUsed",
            Self::VcIdIssuerMismatch => "VcIdIssuerMismatch",
            Self::CapacityExceeded(_) => "CapacityExceeded",
        }
    }

    fn step(&self) -> u8 {
        match self {
            Self::VerificationFailed(_) | Self::CustomerUnresolvable(_) | Self::DeviceNotOwnedByIssuer(_) => 1,
            Self::UnknownVcId | Self::VcIdAlreadyUsed | Self::VcIdIssuerMismatch => 2,
            Self::CapacityExceeded(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AccessError {
    #[error("no active grant for this credential")]
    GrantNotActive,
    #[error("device {0} is not covered by the grant")]
    DeviceNotInGrant(Did),
    #[error("grant does not permit this access")]
    PermissionDenied,
    #[error("request time is outside the grant window")]
    OutsideWindow,
    #[error("next access allowed at {next}")]
    PeriodNotElapsed { next: crate::time::Timestamp },
    #[error("filter chain failed: {0}")]
    Filter(String),
    #[error("command delivery failed: {0}")]
    DeliveryFailed(String),
}

impl Reason for AccessError {
    fn token(&self) -> &'static str {
        match self {
            Self::GrantNotActive => "GrantNotActive",
            Self::DeviceNotInGrant(_) => "DeviceNotInGrant",
            Self::PermissionDenied => "PermissionDenied",
            Self::OutsideWindow => "OutsideWindow",
            Self::PeriodNotElapsed { .. } => "PeriodNotElapsed",
            Self::Filter(_) => "FilterFailure",
            Self::DeliveryFailed(_) => "DeliveryFailed",
        }
    }

    fn step(&self) -> u8 {
        match self {
            Self::GrantNotActive => 1,
            Self::DeviceNotInGrant(_) => 2,
            Self::PermissionDenied => 3,
            Self::OutsideWindow => 4,
            Self::PeriodNotElapsed { .. } => 5,
            Self::Filter(_) | Self::DeliveryFailed(_) => 6,
        }
    }

    fn is_internal(&self) -> bool {
        matches!(self, Self::Filter(_) | Self::DeliveryFailed(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("no device mapped to connectivity id {0:?}")]
    UnknownDevice(String),
    #[error("record signature does not verify under the device key")]
    SignatureInvalid,
    #[error("record is older than the device's latest record")]
    NonMonotoneTimestamp,
    #[error("record has an empty field name")]
    MalformedRecord,
}

impl Reason for IngestError {
    fn token(&self) -> &'static str {
        match self {
            Self::UnknownDevice(_) => "UnknownDevice",
            Self::SignatureInvalid => "SignatureInvalid",
            Self::NonMonotoneTimestamp => "NonMonotoneTimestamp",
            Self::MalformedRecord => "MalformedRecord",
        }
    }

    fn step(&self) -> u8 {
        match self {
            Self::UnknownDevice(_) => 1,
            Self::SignatureInvalid | Self::MalformedRecord => 2,
            Self::NonMonotoneTimestamp => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OwnerPolicyError {
    #[error("owner {0} cannot be resolved")]
    OwnerUnresolvable(Did),
    #[error("policy signature does not verify under the owner key")]
    SignatureInvalid,
    #[error("policy is older than the one installed")]
    Stale,
    #[error(transparent)]
    Invalid(#[from] PolicyError),
}

impl Reason for OwnerPolicyError {
    fn token(&self) -> &'static str {
        match self {
            Self::OwnerUnresolvable(_) => "OwnerUnresolvable",
            Self::SignatureInvalid => "SignatureInvalid",
            Self::Stale => "PolicyStale",
            Self::Invalid(_) => "PolicyInvalid",
        }
    }

    fn step(&self) -> u8 {
        match self {
            Self::OwnerUnresolvable(_) => 1,
            Self::SignatureInvalid => 2,
            Self::Invalid(_) => 3,
            Self::Stale => 4,
        }
    }
}
