//! Request and response bodies of the HTTP API.

use serde::{Deserialize, Serialize};

use iotx_core::canonical::canonicalize_serialize;
use iotx_core::{Did, Fields, Signature, Signer, Timestamp, VcId};

/// Body of every 4xx/5xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub step: u8,
    /// Detail token, e.g. why a credential failed verification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct VcIdRequest {
    pub owner_did: Did,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VcIdResponse {
    pub vc_id: VcId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PublishResponse {
    pub id: Did,
    pub revision: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrantsResponse {
    pub active: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ClockInfo {
    pub now: Timestamp,
    pub manual: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetClock {
    pub now: Timestamp,
}

/// What a customer signs to use a grant. `command` is present for control
/// requests only.
#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct AccessClaim<'a> {
    pub action: &'a str,
    pub as_of: Timestamp,
    pub customer: &'a Did,
    pub device: &'a Did,
    pub vc_id: &'a VcId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<&'a Fields>,
}

impl AccessClaim<'_> {
    pub fn payload(&self) -> Vec<u8> {
        canonicalize_serialize(self).expect("claims hold no floats")
    }

    pub fn sign(&self, signer: &dyn Signer) -> Result<Signature, iotx_core::crypto::SignError> {
        signer.sign(&self.payload())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DataQuery {
    pub customer: Did,
    pub as_of: Timestamp,
    pub signature: Signature,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ControlRequest {
    pub customer: Did,
    pub as_of: Timestamp,
    pub command: Fields,
    pub signature: Signature,
}

/// A device proving it holds its key before collecting its commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DrainRequest {
    pub as_of: Timestamp,
    pub signature: Signature,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct DrainClaim<'a> {
    action: &'a str,
    as_of: Timestamp,
    device: &'a Did,
}

pub fn drain_payload(device: &Did, as_of: Timestamp) -> Vec<u8> {
    canonicalize_serialize(&DrainClaim {
        action: "drain",
        as_of,
        device,
    })
    .expect("claims hold no floats")
}
