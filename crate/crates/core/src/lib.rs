//! Core of the IoT exchange: devices of any connectivity are registered under
//! decentralized identifiers, third parties obtain signed access credentials
//! from device owners, and the exchange enforces those credentials while
//! running data and control flows through field-level privacy filters.
//!
//! Module map:
//!
//! - [`identity`]: DID syntax, DID documents, method plugins, the identity hub.
//! - [`credential`]: verifiable credentials over access requests.
//! - [`keystore`]: device key custody and the identity mapping table.
//! - [`policy`]: owner issuance flow and authorizing party endorsement.
//! - [`exchange`]: registration, vcId ledger, grants, ingestion, access.
//! - [`privacy`]: named filters applied in succession to records.
//! - [`devicesim`]: deterministic simulated device fleet.
//! - [`storage`]: per-device ordered telemetry store.

pub mod canonical;
pub mod credential;
pub mod crypto;
pub mod devicesim;
pub mod exchange;
pub mod identity;
pub mod keystore;
pub mod policy;
pub mod privacy;
pub mod storage;
pub mod telemetry;
pub mod time;

pub use canonical::{canonicalize, canonicalize_serialize, CanonicalError};
pub use credential::{
    sign_credential, verify_credential, AccessRequestSubject, CredentialBody, Endorsement,
    Permission, Permissions, VcId, VerifiableCredential, VerifyFailure,
};
pub use crypto::{LocalSigner, PublicKey, Signature, Signer};
pub use exchange::{AccessGrant, DeviceRegistration, Exchange, ExchangeConfig, GrantNotice};
pub use identity::{
    ConnectivityType, Did, DidDocument, DidResolver, IdentityHub, Resolver, ServiceEntry,
};
pub use keystore::{IdentityMapping, KeyHandle, KeyRecord, Keystore, LookupKey};
pub use policy::{AccessRequestDraft, AuthorizingParty, DenyPolicy, OwnerAgent, OwnerPolicy};
pub use privacy::{FilterDef, FilterMode, FilterRegistry};
pub use telemetry::{FieldValue, Fields, SignedRecord, TelemetryRecord};
pub use time::{Clock, ManualClock, Period, SystemClock, Timestamp};
