//! Owner-side issuance of access credentials and authorizing party
//! endorsement.
//!
//! An owner keeps three things: the DIDs exempt from privacy processing,
//! the filter spec mapping device sets to filter chains, and per-device
//! capacity. Authorizing parties keep a deny list; a customer on any
//! party's deny list never receives a credential.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credential::{
    check_terms, sign_credential, AccessRequestSubject, CredentialBody, CredentialError, Endorsement, Permissions,
    VcId, VerifiableCredential,
};
use crate::crypto::Signer;
use crate::identity::{Did, DidResolver, IdentityError};
use crate::privacy::{FilterRegistry, PrivacyError};
use crate::time::{Clock, Period, Timestamp};

pub const DEFAULT_DEVICE_CAPACITY: u32 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FilterSpecEntry {
    pub device_ids: BTreeSet<Did>,
    pub filter_chain: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct OwnerPolicy {
    pub privacy_exempt_list: BTreeSet<Did>,
    pub filter_spec: Vec<FilterSpecEntry>,
    pub device_capacity: BTreeMap<Did, u32>,
    pub authorizing_parties: Vec<Did>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Filter(#[from] PrivacyError),
    #[error("capacity for {0} must be at least 1")]
    ZeroCapacity(Did),
    #[error("policy file: {0}")]
    Parse(String),
}

impl OwnerPolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))
    }

    pub fn validate(&self, filters: &FilterRegistry) -> Result<(), PolicyError> {
        for entry in &self.filter_spec {
            filters.check_chain(&entry.filter_chain)?;
        }
        if let Some((did, _)) = self.device_capacity.iter().find(|(_, c)| **c == 0) {
            return Err(PolicyError::ZeroCapacity(did.clone()));
        }
        Ok(())
    }

    pub fn capacity_for(&self, device: &Did) -> u32 {
        self.device_capacity.get(device).copied().unwrap_or(DEFAULT_DEVICE_CAPACITY)
    }

    pub fn is_privacy_exempt(&self, customer: &Did) -> bool {
        self.privacy_exempt_list.contains(customer)
    }
}

/// Filter chain for one device: every matching filter-spec entry's chain,
/// concatenated in entry order.
pub fn filter_chain_for(device: &Did, policy: &OwnerPolicy) -> Vec<String> {
    policy
        .filter_spec
        .iter()
        .filter(|e| e.device_ids.contains(device))
        .flat_map(|e| e.filter_chain.iter().cloned())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct DenyPolicy {
    pub denied_dids: BTreeSet<Did>,
}

impl DenyPolicy {
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(text).map_err(|e| PolicyError::Parse(e.to_string()))
    }
}

/// What a customer asks the owner for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AccessRequestDraft {
    pub customer_did: Did,
    pub device_ids: Vec<Did>,
    pub start: Timestamp,
    pub end: Timestamp,
    pub period: Period,
    pub permissions: Permissions,
}

impl AccessRequestDraft {
    pub fn validate(&self) -> Result<(), String> {
        check_terms(&self.device_ids, self.start, self.end, self.period, &self.permissions)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{party} denies access")]
pub struct Denied {
    pub party: Did,
}

pub struct AuthorizingParty {
    pub did: Did,
    pub deny: DenyPolicy,
    signer: Box<dyn Signer>,
}

impl AuthorizingParty {
    pub fn new(did: Did, deny: DenyPolicy, signer: Box<dyn Signer>) -> Self {
        Self { did, deny, signer }
    }

    /// Signs the credential terms unless the customer is on the deny list.
    pub fn endorse(&self, body: &CredentialBody) -> Result<Endorsement, Denied> {
        if self.deny.denied_dids.contains(&body.credential_subject.id) {
            return Err(Denied { party: self.did.clone() });
        }
        let signature = self
            .signer
            .sign(&body.endorsement_payload())
            .map_err(|_| Denied { party: self.did.clone() })?;
        Ok(Endorsement { authorizing_party: self.did.clone(), signature })
    }
}

impl std::fmt::Debug for AuthorizingParty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthorizingParty").field("did", &self.did).field("deny", &self.deny).finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndorseError {
    #[error(transparent)]
    Denied(#[from] Denied),
    #[error("authorizing party {0} unreachable")]
    Unavailable(Did),
}

/// How the owner reaches authorizing parties.
pub trait PartyDirectory {
    fn endorse(&self, party: &Did, body: &CredentialBody) -> Result<Endorsement, EndorseError>;
}

impl PartyDirectory for [AuthorizingParty] {
    fn endorse(&self, party: &Did, body: &CredentialBody) -> Result<Endorsement, EndorseError> {
        let p = self.iter().find(|p| &p.did == party).ok_or_else(|| EndorseError::Unavailable(party.clone()))?;
        Ok(p.endorse(body)?)
    }
}

impl PartyDirectory for Vec<AuthorizingParty> {
    fn endorse(&self, party: &Did, body: &CredentialBody) -> Result<Endorsement, EndorseError> {
        self.as_slice().endorse(party, body)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExchangeClientError {
    #[error("exchange unavailable: {0}")]
    Unavailable(String),
    #[error("exchange rejected request: {0}")]
    Rejected(String),
}

/// The exchange operations an owner needs during issuance.
pub trait ExchangeClient {
    fn issue_vc_id(&self, owner: &Did) -> Result<VcId, ExchangeClientError>;
    fn active_grants(&self, device: &Did) -> Result<u32, ExchangeClientError>;
}

/// Why the owner refused to issue. `step` is the issuance step that failed.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IssueRejection {
    #[error("request invalid: {0}")]
    RequestInvalid(String),
    #[error("customer {0} cannot be resolved")]
    CustomerUnresolvable(Did),
    #[error("device {0} cannot be resolved")]
    DeviceUnresolvable(Did),
    #[error("device {0} is at capacity")]
    CapacityExceeded(Did),
    #[error("exchange unavailable: {0}")]
    ExchangeUnavailable(String),
    #[error("exchange refused: {0}")]
    ExchangeRejected(String),
    #[error("denied by authorizing party {0}")]
    PolicyDenied(Did),
    #[error("authorizing party {0} unreachable")]
    PartyUnavailable(Did),
    #[error("signing failed: {0}")]
    Signing(String),
}

impl IssueRejection {
    pub fn token(&self) -> &'static str {
        match self {
            Self::RequestInvalid(_) => "RequestInvalid",
            Self::CustomerUnresolvable(_) => "CustomerUnresolvable",
            Self::DeviceUnresolvable(_) => "DeviceUnresolvable",
            Self::CapacityExceeded(_) => "CapacityExceeded",
            Self::ExchangeUnavailable(_) => "ExchangeUnavailable",
            Self::ExchangeRejected(_) => "ExchangeRejected",
            Self::PolicyDenied(_) => "PolicyDenied",
            Self::PartyUnavailable(_) => "PartyUnavailable",
            Self::Signing(_) => "Signing",
        }
    }

    pub fn step(&self) -> u8 {
        match self {
            Self::RequestInvalid(_) => 0,
            Self::CustomerUnresolvable(_) | Self::DeviceUnresolvable(_) => 1,
            Self::CapacityExceeded(_) => 2,
            Self::ExchangeUnavailable(_) | Self::ExchangeRejected(_) => 4,
            Self::PolicyDenied(_) | Self::PartyUnavailable(_) => 5,
            Self::Signing(_) => 6,
        }
    }

    /// Policy outcomes, as opposed to infrastructure faults.
    pub fn is_policy(&self) -> bool {
        !matches!(
            self,
            Self::ExchangeUnavailable(_) | Self::ExchangeRejected(_) | Self::PartyUnavailable(_) | Self::Signing(_)
        )
    }
}

/// The device owner's issuing agent.
pub struct OwnerAgent {
    did: Did,
    signer: Arc<dyn Signer>,
    policy: RwLock<OwnerPolicy>,
    clock: Arc<dyn Clock>,
    // Issuance and policy replacement are serialized per owner.
    serial: Mutex<()>,
}

impl OwnerAgent {
    pub fn new(did: Did, signer: Arc<dyn Signer>, policy: OwnerPolicy, clock: Arc<dyn Clock>) -> Self {
        Self { did, signer, policy: RwLock::new(policy), clock, serial: Mutex::new(()) }
    }

    pub fn did(&self) -> &Did {
        &self.did
    }

    pub fn policy(&self) -> OwnerPolicy {
        self.policy.read().clone()
    }

    pub fn replace_policy(&self, policy: OwnerPolicy) {
        let _g = self.serial.lock();
        *self.policy.write() = policy;
    }

    /// Runs the issuance flow for one request:
    /// 1. resolve the customer and every device;
    /// 2. check each device has room for one more grant;
    /// 3. decide privacy processing (on unless the customer is exempt);
    /// 4. obtain a credential id from the exchange;
    /// 5. collect every authorizing party's endorsement, any denial aborts;
    /// 6. sign.
    pub fn owner_issue_flow(
        &self,
        draft: &AccessRequestDraft,
        exchange: &dyn ExchangeClient,
        resolver: &dyn DidResolver,
        parties: &dyn PartyDirectory,
    ) -> Result<VerifiableCredential, IssueRejection> {
        let _g = self.serial.lock();
        let policy = self.policy.read().clone();
        draft.validate().map_err(IssueRejection::RequestInvalid)?;

        let unavailable = |e: &IdentityError| matches!(e, IdentityError::Unavailable(_));
        if let Err(e) = resolver.resolve(&draft.customer_did) {
            return Err(if unavailable(&e) {
                IssueRejection::ExchangeUnavailable(e.to_string())
            } else {
                IssueRejection::CustomerUnresolvable(draft.customer_did.clone())
            });
        }
        for device in &draft.device_ids {
            if let Err(e) = resolver.resolve(device) {
                return Err(if unavailable(&e) {
                    IssueRejection::ExchangeUnavailable(e.to_string())
                } else {
                    IssueRejection::DeviceUnresolvable(device.clone())
                });
            }
        }

        for device in &draft.device_ids {
            let active = exchange.active_grants(device).map_err(client_rejection)?;
            if active + 1 > policy.capacity_for(device) {
                return Err(IssueRejection::CapacityExceeded(device.clone()));
            }
        }

        let privacy_preserving = !policy.is_privacy_exempt(&draft.customer_did);

        let vc_id = exchange.issue_vc_id(&self.did).map_err(client_rejection)?;

        let body = CredentialBody {
            vc_id,
            issuer: self.did.clone(),
            issuance_date: self.clock.now(),
            credential_subject: AccessRequestSubject {
                id: draft.customer_did.clone(),
                device_ids: draft.device_ids.clone(),
                start: draft.start,
                end: draft.end,
                period: draft.period,
                permissions: draft.permissions.clone(),
                privacy_preserving,
            },
        };
        let mut endorsements = Vec::with_capacity(policy.authorizing_parties.len());
        for party in &policy.authorizing_parties {
            match parties.endorse(party, &body) {
                Ok(e) => endorsements.push(e),
                Err(EndorseError::Denied(d)) => return Err(IssueRejection::PolicyDenied(d.party)),
                Err(EndorseError::Unavailable(p)) => return Err(IssueRejection::PartyUnavailable(p)),
            }
        }

        sign_credential(body, endorsements, self.signer.as_ref(), resolver).map_err(|e| match e {
            CredentialError::SubjectInvalid(s) => IssueRejection::RequestInvalid(s),
            other => IssueRejection::Signing(other.to_string()),
        })
    }
}

fn client_rejection(e: ExchangeClientError) -> IssueRejection {
    match e {
        ExchangeClientError::Unavailable(s) => IssueRejection::ExchangeUnavailable(s),
        ExchangeClientError::Rejected(s) => IssueRejection::ExchangeRejected(s),
    }
}
