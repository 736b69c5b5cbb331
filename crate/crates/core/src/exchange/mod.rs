//! The exchange service: device registration, the credential id ledger,
//! credential presentation, grant enforcement, telemetry ingestion and the
//! privacy pipeline between devices and customers.
//!
//! All mutable state sits behind one mutex so that ledger consumption,
//! capacity reservation and last-access updates are each a single atomic
//! check-and-set. Signature checks and filtering run outside it.

mod error;
mod grant;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::ops::Bound;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use error::{
    AccessError, IngestError, OwnerPolicyError, PresentError, Reason, RegisterError, VcIdError,
};
pub use grant::{AccessGrant, DeviceRegistration, GrantNotice, GrantState, VcIdLedgerEntry, Window};

use crate::canonical::canonicalize_serialize;
use crate::credential::{verify_credential, Permission, VcId, VerifiableCredential};
use crate::crypto::Signature;
use crate::identity::{ConnectivityType, Did, DidDocument, DidResolver, IdentityError, Resolver, LOCAL_METHOD};
use crate::keystore::{IdentityMapping, Keystore, KeystoreError, LookupKey};
use crate::policy::{filter_chain_for, ExchangeClient, ExchangeClientError, OwnerPolicy, DEFAULT_DEVICE_CAPACITY};
use crate::privacy::FilterRegistry;
use crate::storage::TelemetryStore;
use crate::telemetry::{Fields, SignedRecord, TelemetryRecord};
use crate::time::{Clock, Timestamp};

#[derive(Debug, Clone)]
pub struct ExchangeConfig {
    /// Capacity for devices whose owner policy names none.
    pub default_capacity: u32,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        Self { default_capacity: DEFAULT_DEVICE_CAPACITY }
    }
}

/// Body of a registration request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RegisterDevice {
    pub owner_did: Did,
    pub connectivity_type: ConnectivityType,
    pub connectivity_id: String,
    pub device_unique_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_key_slot: Option<String>,
}

/// An owner policy pushed to the exchange, signed by the owner. An upload
/// older than the installed one is refused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SignedPolicy {
    pub owner: Did,
    pub issued_at: Timestamp,
    pub policy: OwnerPolicy,
    pub signature: Signature,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PolicyPayload<'a> {
    owner: &'a Did,
    issued_at: Timestamp,
    policy: &'a OwnerPolicy,
}

impl SignedPolicy {
    pub fn payload(owner: &Did, issued_at: Timestamp, policy: &OwnerPolicy) -> Vec<u8> {
        canonicalize_serialize(&PolicyPayload { owner, issued_at, policy }).expect("policy is canonicalizable")
    }

    pub fn sign(
        owner: Did,
        issued_at: Timestamp,
        policy: OwnerPolicy,
        signer: &dyn crate::crypto::Signer,
    ) -> Result<Self, crate::crypto::SignError> {
        let signature = signer.sign(&Self::payload(&owner, issued_at, &policy))?;
        Ok(Self { owner, issued_at, policy, signature })
    }
}

/// Where control commands and grant notices for devices go.
pub trait CommandSink: Send + Sync {
    fn deliver(&self, device: &Did, command: Fields) -> Result<(), String>;

    fn grant_notice(&self, _device: &Did, _notice: &GrantNotice) {}
}

/// Per-device command queues drained by whoever speaks for the device.
#[derive(Debug, Default)]
pub struct Outbox {
    queues: Mutex<HashMap<Did, VecDeque<Fields>>>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn drain(&self, device: &Did) -> Vec<Fields> {
        self.queues.lock().remove(device).map(Vec::from).unwrap_or_default()
    }
}

impl CommandSink for Outbox {
    fn deliver(&self, device: &Did, command: Fields) -> Result<(), String> {
        self.queues.lock().entry(device.clone()).or_default().push_back(command);
        Ok(())
    }
}

struct OwnerPolicyEntry {
    issued_at: Timestamp,
    policy: OwnerPolicy,
}

#[derive(Default)]
struct State {
    registrations: HashMap<Did, DeviceRegistration>,
    by_connectivity: HashMap<(ConnectivityType, String), Did>,
    ledger: HashMap<VcId, VcIdLedgerEntry>,
    grants: HashMap<VcId, AccessGrant>,
    owner_policies: HashMap<Did, OwnerPolicyEntry>,
}

impl State {
    fn active_grants(&self, device: &Did) -> u32 {
        self.grants
            .values()
            .filter(|g| g.state == GrantState::Active && g.device_ids.contains(device))
            .count() as u32
    }

    fn capacity(&self, owner: &Did, device: &Did, default: u32) -> u32 {
        self.owner_policies
            .get(owner)
            .and_then(|e| e.policy.device_capacity.get(device).copied())
            .unwrap_or(default)
    }

    fn expire(&mut self, now: Timestamp) -> usize {
        let mut n = 0;
        for g in self.grants.values_mut() {
            if g.state == GrantState::Active && g.window.end < now {
                g.state = GrantState::Expired;
                n += 1;
            }
        }
        n
    }
}

pub struct Exchange {
    config: ExchangeConfig,
    resolver: Resolver,
    keystore: Arc<Keystore>,
    store: Arc<dyn TelemetryStore>,
    filters: Arc<FilterRegistry>,
    clock: Arc<dyn Clock>,
    sink: Arc<dyn CommandSink>,
    state: Mutex<State>,
    // Registration does key generation and persistence; keep it off `state`.
    registering: Mutex<()>,
}

impl Exchange {
    pub fn new(
        config: ExchangeConfig,
        resolver: Resolver,
        keystore: Arc<Keystore>,
        store: Arc<dyn TelemetryStore>,
        filters: Arc<FilterRegistry>,
        clock: Arc<dyn Clock>,
        sink: Arc<dyn CommandSink>,
    ) -> Self {
        Self {
            config,
            resolver,
            keystore,
            store,
            filters,
            clock,
            sink,
            state: Mutex::new(State::default()),
            registering: Mutex::new(()),
        }
    }

    pub fn resolver(&self) -> &Resolver {
        &self.resolver
    }

    pub fn keystore(&self) -> &Arc<Keystore> {
        &self.keystore
    }

    pub fn filters(&self) -> &FilterRegistry {
        &self.filters
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn store(&self) -> &Arc<dyn TelemetryStore> {
        &self.store
    }

    /// Enrolls a device: records the connectivity binding, then generates
    /// its key, creates its DID bound to the connectivity id and commits
    /// the identity mapping. Nothing is left behind if any step fails.
    pub fn register_device(&self, req: &RegisterDevice) -> Result<DeviceRegistration, RegisterError> {
        let _serial = self.registering.lock();
        req.connectivity_type.check(&req.connectivity_id).map_err(RegisterError::Identity)?;
        self.resolver
            .resolve(&req.owner_did)
            .map_err(|_| RegisterError::OwnerUnresolvable(req.owner_did.clone()))?;
        let dup_conn = || RegisterError::DuplicateConnectivityId {
            kind: req.connectivity_type,
            id: req.connectivity_id.clone(),
        };
        if self
            .state
            .lock()
            .by_connectivity
            .contains_key(&(req.connectivity_type, req.connectivity_id.clone()))
        {
            return Err(dup_conn());
        }
        if self.keystore.lookup_by(LookupKey::ConnectivityId(&req.connectivity_id)).is_ok() {
            return Err(dup_conn());
        }
        if self.keystore.lookup_by(LookupKey::DeviceUniqueId(&req.device_unique_id)).is_ok() {
            return Err(RegisterError::DuplicateSerial(req.device_unique_id.clone()));
        }

        let now = self.clock.now();
        let key = self.keystore.generate_key().map_err(RegisterError::Keystore)?;
        let undo_key = |e: RegisterError| {
            let _ = self.keystore.discard_key(&key.key_handle);
            e
        };
        let signer = self.keystore.signer(&key.key_handle).map_err(|e| undo_key(RegisterError::Keystore(e)))?;
        let doc = DidDocument::build(
            LOCAL_METHOD,
            &signer,
            &[(req.connectivity_type, req.connectivity_id.clone())],
            now,
        )
        .map_err(|e| undo_key(RegisterError::Identity(e)))?;
        let mapping = IdentityMapping {
            device_unique_id: req.device_unique_id.clone(),
            did: doc.id.clone(),
            connectivity_id: req.connectivity_id.clone(),
            cloud_key_slot: req.cloud_key_slot.clone(),
            key_handle: key.key_handle.clone(),
        };
        self.keystore.map_identity(mapping).map_err(|e| {
            undo_key(match e {
                KeystoreError::DuplicateIdentity { field: "deviceUniqueId", value } => RegisterError::DuplicateSerial(value),
                KeystoreError::DuplicateIdentity { field: "connectivityId", .. } => dup_conn(),
                other => RegisterError::Keystore(other),
            })
        })?;
        if let Err(e) = self.resolver.publish(doc.clone()) {
            let _ = self.keystore.unmap(&req.device_unique_id);
            return Err(undo_key(RegisterError::Identity(e)));
        }

        let registration = DeviceRegistration {
            did: doc.id,
            connectivity_type: req.connectivity_type,
            connectivity_id: req.connectivity_id.clone(),
            owner_did: req.owner_did.clone(),
            registered_at: now,
        };
        let mut state = self.state.lock();
        state
            .by_connectivity
            .insert((req.connectivity_type, req.connectivity_id.clone()), registration.did.clone());
        state.registrations.insert(registration.did.clone(), registration.clone());
        Ok(registration)
    }

    pub fn registration(&self, device: &Did) -> Option<DeviceRegistration> {
        self.state.lock().registrations.get(device).cloned()
    }

    /// Mints a fresh credential id for an owner and records it unconsumed.
    pub fn issue_vc_id(&self, owner: &Did) -> Result<VcId, VcIdError> {
        self.resolver.resolve(owner).map_err(|_| VcIdError::OwnerUnresolvable(owner.clone()))?;
        let now = self.clock.now();
        let mut state = self.state.lock();
        let vc_id = loop {
            let candidate = VcId::generate();
            if !state.ledger.contains_key(&candidate) {
                break candidate;
            }
        };
        state.ledger.insert(
            vc_id.clone(),
            VcIdLedgerEntry { vc_id: vc_id.clone(), issued_to: owner.clone(), issued_at: now, consumed: false },
        );
        Ok(vc_id)
    }

    pub fn ledger_entry(&self, vc_id: &VcId) -> Option<VcIdLedgerEntry> {
        self.state.lock().ledger.get(vc_id).cloned()
    }

    /// Installs an owner's filter spec and capacities, as pushed by the
    /// owner agent.
    pub fn set_owner_policy(&self, signed: &SignedPolicy) -> Result<(), OwnerPolicyError> {
        let doc = self
            .resolver
            .resolve(&signed.owner)
            .map_err(|_| OwnerPolicyError::OwnerUnresolvable(signed.owner.clone()))?;
        let payload = SignedPolicy::payload(&signed.owner, signed.issued_at, &signed.policy);
        if !doc.public_key.verify(&payload, &signed.signature) {
            return Err(OwnerPolicyError::SignatureInvalid);
        }
        signed.policy.validate(&self.filters)?;
        let mut state = self.state.lock();
        if let Some(current) = state.owner_policies.get(&signed.owner) {
            if signed.issued_at < current.issued_at {
                return Err(OwnerPolicyError::Stale);
            }
        }
        state.owner_policies.insert(
            signed.owner.clone(),
            OwnerPolicyEntry { issued_at: signed.issued_at, policy: signed.policy.clone() },
        );
        Ok(())
    }

    pub fn owner_policy(&self, owner: &Did) -> Option<OwnerPolicy> {
        self.state.lock().owner_policies.get(owner).map(|e| e.policy.clone())
    }

    /// Accepts a credential and activates its grant:
    /// 1. verify the credential, the customer, and that the issuer owns every device;
    /// 2. consume the credential id from the ledger;
    /// 3. reserve capacity on every device;
    /// 4. build filter chains when privacy processing was requested;
    /// 5. notify devices and return the notice for the customer.
    ///
    /// The id stays consumed if step 3 fails, so the owner must reissue.
    pub fn present_credential(&self, vc: &VerifiableCredential) -> Result<GrantNotice, PresentError> {
        verify_credential(vc, &self.resolver).map_err(PresentError::VerificationFailed)?;
        let subject = &vc.credential_subject;
        self.resolver
            .resolve(&subject.id)
            .map_err(|_| PresentError::CustomerUnresolvable(subject.id.clone()))?;

        let now = self.clock.now();
        let notice = {
            let mut state = self.state.lock();
            for device in &subject.device_ids {
                match state.registrations.get(device) {
                    Some(r) if r.owner_did == vc.issuer => {}
                    _ => return Err(PresentError::DeviceNotOwnedByIssuer(device.clone())),
                }
            }

            let entry = state.ledger.get_mut(&vc.vc_id).ok_or(PresentError::UnknownVcId)?;
            if entry.consumed {
                return Err(PresentError::VcIdAlreadyUsed);
            }
            if entry.issued_to != vc.issuer {
                return Err(PresentError::VcIdIssuerMismatch);
            }
            entry.consumed = true;

            state.expire(now);
            for device in &subject.device_ids {
                let cap = state.capacity(&vc.issuer, device, self.config.default_capacity);
                if state.active_grants(device) + 1 > cap {
                    return Err(PresentError::CapacityExceeded(device.clone()));
                }
            }

            let filter_chains: BTreeMap<Did, Vec<String>> = match state.owner_policies.get(&vc.issuer) {
                Some(p) if subject.privacy_preserving => subject
                    .device_ids
                    .iter()
                    .map(|d| (d.clone(), filter_chain_for(d, &p.policy)))
                    .filter(|(_, chain)| !chain.is_empty())
                    .collect(),
                _ => BTreeMap::new(),
            };
            let grant = AccessGrant {
                vc_id: vc.vc_id.clone(),
                customer_did: subject.id.clone(),
                issuer: vc.issuer.clone(),
                device_ids: subject.device_ids.clone(),
                window: Window { start: subject.start, end: subject.end },
                period: subject.period,
                permissions: subject.permissions.clone(),
                filter_chains,
                last_access: subject.device_ids.iter().map(|d| (d.clone(), None)).collect(),
                last_control: subject.device_ids.iter().map(|d| (d.clone(), None)).collect(),
                state: if now > subject.end { GrantState::Expired } else { GrantState::Active },
            };
            let notice = grant.notice(subject.privacy_preserving);
            state.grants.insert(vc.vc_id.clone(), grant);
            notice
        };
        for device in &notice.device_ids {
            self.sink.grant_notice(device, &notice);
        }
        Ok(notice)
    }

    pub fn grant(&self, vc_id: &VcId) -> Option<AccessGrant> {
        self.state.lock().grants.get(vc_id).cloned()
    }

    pub fn active_grants(&self, device: &Did) -> u32 {
        self.state.lock().active_grants(device)
    }

    /// Gate shared by data and control access. On success records `as_of`
    /// as the device's latest access and returns the previous one with the
    /// device's filter chain.
    fn admit(
        &self,
        customer: &Did,
        vc_id: &VcId,
        device: &Did,
        as_of: Timestamp,
        permission: Permission,
    ) -> Result<(AccessGrant, Option<Timestamp>), AccessError> {
        let mut state = self.state.lock();
        let grant = state.grants.get_mut(vc_id).ok_or(AccessError::GrantNotActive)?;
        if grant.state != GrantState::Active {
            return Err(AccessError::GrantNotActive);
        }
        if &grant.customer_did != customer {
            return Err(AccessError::PermissionDenied);
        }
        if !grant.device_ids.contains(device) {
            return Err(AccessError::DeviceNotInGrant(device.clone()));
        }
        if !grant.allows(permission) {
            return Err(AccessError::PermissionDenied);
        }
        if !grant.window.contains(as_of) {
            return Err(AccessError::OutsideWindow);
        }
        let period = grant.period.secs() as i64;
        let slot = match permission {
            Permission::Data => grant.last_access.entry(device.clone()).or_default(),
            Permission::Control => grant.last_control.entry(device.clone()).or_default(),
        };
        let previous = *slot;
        if let Some(last) = previous {
            if as_of.since(last) < period {
                return Err(AccessError::PeriodNotElapsed { next: last.plus(period) });
            }
        }
        *slot = Some(as_of);
        Ok((grant.clone(), previous))
    }

    /// Returns the device's records since the previous access (or the
    /// window start) up to `as_of`, each run through the device's filter
    /// chain.
    pub fn access_data(
        &self,
        customer: &Did,
        vc_id: &VcId,
        device: &Did,
        as_of: Timestamp,
    ) -> Result<Vec<TelemetryRecord>, AccessError> {
        let (grant, previous) = self.admit(customer, vc_id, device, as_of, Permission::Data)?;
        let from = match previous {
            Some(t) => Bound::Excluded(t),
            None => Bound::Included(grant.window.start),
        };
        let chain = grant.chain_for(device);
        self.store
            .scan(device, from, Bound::Included(as_of))
            .iter()
            .map(|r| self.filters.apply_chain(chain, r).map_err(|e| AccessError::Filter(e.to_string())))
            .collect()
    }

    /// Runs a command through the device's filter chain and hands it to the
    /// device.
    pub fn access_control(
        &self,
        customer: &Did,
        vc_id: &VcId,
        device: &Did,
        command: &Fields,
        as_of: Timestamp,
    ) -> Result<Fields, AccessError> {
        let (grant, _) = self.admit(customer, vc_id, device, as_of, Permission::Control)?;
        let filtered = self
            .filters
            .apply_chain_fields(grant.chain_for(device), command)
            .map_err(|e| AccessError::Filter(e.to_string()))?;
        self.sink.deliver(device, filtered.clone()).map_err(AccessError::DeliveryFailed)?;
        Ok(filtered)
    }

    /// Verifies a device record against the key bound to its connectivity
    /// id and stores it.
    pub fn ingest_telemetry(&self, connectivity_id: &str, signed: &SignedRecord) -> Result<(), IngestError> {
        let mapping = self
            .keystore
            .lookup_by(LookupKey::ConnectivityId(connectivity_id))
            .map_err(|_| IngestError::UnknownDevice(connectivity_id.to_owned()))?;
        let doc = self
            .resolver
            .resolve(&mapping.did)
            .map_err(|_| IngestError::UnknownDevice(connectivity_id.to_owned()))?;
        if signed.record.device_did != mapping.did || !signed.verify(&doc.public_key) {
            return Err(IngestError::SignatureInvalid);
        }
        if !signed.record.has_valid_field_names() {
            return Err(IngestError::MalformedRecord);
        }
        self.store.append(signed.record.clone()).map_err(|_| IngestError::NonMonotoneTimestamp)
    }

    /// Moves every active grant whose window ended before `now` to expired.
    pub fn expire_grants(&self, now: Timestamp) -> usize {
        self.state.lock().expire(now)
    }
}

impl std::fmt::Debug for Exchange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = self.state.lock();
        f.debug_struct("Exchange")
            .field("devices", &state.registrations.len())
            .field("ledger", &state.ledger.len())
            .field("grants", &state.grants.len())
            .finish()
    }
}

impl ExchangeClient for Exchange {
    fn issue_vc_id(&self, owner: &Did) -> Result<VcId, ExchangeClientError> {
        Exchange::issue_vc_id(self, owner).map_err(|e| ExchangeClientError::Rejected(e.token().into()))
    }

    fn active_grants(&self, device: &Did) -> Result<u32, ExchangeClientError> {
        Ok(Exchange::active_grants(self, device))
    }
}

impl DidResolver for Exchange {
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        self.resolver.resolve(did)
    }
}

#[cfg(test)]
mod tests;
