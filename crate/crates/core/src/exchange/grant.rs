use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::credential::{Permission, Permissions, VcId};
use crate::identity::{ConnectivityType, Did};
use crate::time::{Period, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeviceRegistration {
    pub did: Did,
    pub connectivity_type: ConnectivityType,
    pub connectivity_id: String,
    pub owner_did: Did,
    pub registered_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VcIdLedgerEntry {
    pub vc_id: VcId,
    pub issued_to: Did,
    pub issued_at: Timestamp,
    pub consumed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrantState {
    Active,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl Window {
    pub fn contains(&self, t: Timestamp) -> bool {
        self.start <= t && t <= self.end
    }
}

/// Exchange-side state for one accepted credential.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccessGrant {
    pub vc_id: VcId,
    pub customer_did: Did,
    pub issuer: Did,
    pub device_ids: Vec<Did>,
    pub window: Window,
    pub period: Period,
    pub permissions: Permissions,
    /// Empty when the credential did not ask for privacy processing.
    pub filter_chains: BTreeMap<Did, Vec<String>>,
    pub last_access: BTreeMap<Did, Option<Timestamp>>,
    pub last_control: BTreeMap<Did, Option<Timestamp>>,
    pub state: GrantState,
}

impl AccessGrant {
    pub fn allows(&self, p: Permission) -> bool {
        self.permissions.contains(&p)
    }

    pub fn chain_for(&self, device: &Did) -> &[String] {
        self.filter_chains.get(device).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn notice(&self, privacy_preserving: bool) -> GrantNotice {
        GrantNotice {
            vc_id: self.vc_id.clone(),
            customer_did: self.customer_did.clone(),
            device_ids: self.device_ids.clone(),
            start: self.window.start,
            end: self.window.end,
            period: self.period,
            permissions: self.permissions.clone(),
            privacy_preserving,
            filter_chains: self.filter_chains.clone(),
        }
    }
}

/// Sent to the customer (and to each device) once a grant is live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GrantNotice {
    pub vc_id: VcId,
    pub customer_did: Did,
    pub device_ids: Vec<Did>,
    pub start: Timestamp,
    pub end: Timestamp,
    pub period: Period,
    pub permissions: Permissions,
    pub privacy_preserving: bool,
    pub filter_chains: BTreeMap<Did, Vec<String>>,
}
