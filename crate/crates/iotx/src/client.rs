//! Blocking HTTP client for a running exchange.

use reqwest::blocking::{Client as Http, RequestBuilder};
use reqwest::{StatusCode, Url};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use iotx_core::devicesim::TelemetrySink;
use iotx_core::exchange::{RegisterDevice, SignedPolicy};
use iotx_core::identity::{IdentityError, Revision};
use iotx_core::policy::{ExchangeClient, ExchangeClientError};
use iotx_core::{
    DeviceRegistration, Did, DidDocument, DidResolver, Fields, GrantNotice, OwnerPolicy,
    SignedRecord, Signer, TelemetryRecord, Timestamp, VcId, VerifiableCredential,
};

use crate::wire::{
    drain_payload, AccessClaim, ClockInfo, ControlRequest, DrainRequest, ErrorBody, GrantsResponse,
    PublishResponse, SetClock, VcIdRequest, VcIdResponse,
};

pub const URL_ENV: &str = "IOTX_EXCHANGE_URL";
pub const DEFAULT_URL: &str = "http://127.0.0.1:8700";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach exchange: {0}")]
    Connection(String),
    #[error("{} (HTTP {status}): {}", body.error, body.message)]
    Rejected { status: u16, body: ErrorBody },
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ClientError {
    /// The rejection token, if the exchange answered with one.
    pub fn token(&self) -> Option<&str> {
        match self {
            Self::Rejected { body, .. } => Some(&body.error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    http: Http,
    base: Url,
}

impl Client {
    pub fn new(base: &str) -> Result<Self, ClientError> {
        let base = Url::parse(base)
            .map_err(|e| ClientError::Protocol(format!("bad exchange url {base:?}: {e}")))?;
        if base.cannot_be_a_base() {
            return Err(ClientError::Protocol(format!("bad exchange url {base}")));
        }
        Ok(Self {
            http: Http::new(),
            base,
        })
    }

    /// Uses `IOTX_EXCHANGE_URL`, falling back to the default listen address.
    pub fn from_env() -> Result<Self, ClientError> {
        Self::new(&std::env::var(URL_ENV).unwrap_or_else(|_| DEFAULT_URL.into()))
    }

    pub fn base(&self) -> &Url {
        &self.base
    }

    fn url(&self, segments: &[&str]) -> Url {
        let mut url = self.base.clone();
        url.path_segments_mut()
            .expect("checked in new")
            .pop_if_empty()
            .extend(segments);
        url
    }

    fn send<T: DeserializeOwned>(&self, req: RequestBuilder) -> Result<T, ClientError> {
        let resp = req
            .send()
            .map_err(|e| ClientError::Connection(e.to_string()))?;
        let status = resp.status();
        let bytes = resp
            .bytes()
            .map_err(|e| ClientError::Connection(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&bytes)
                .map_err(|e| ClientError::Protocol(e.to_string()));
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Rejected {
                status: status.as_u16(),
                body,
            }),
            Err(_) => Err(ClientError::Protocol(format!(
                "HTTP {status}: {}",
                String::from_utf8_lossy(&bytes)
            ))),
        }
    }

    fn get<T: DeserializeOwned>(&self, segments: &[&str]) -> Result<T, ClientError> {
        self.send(self.http.get(self.url(segments)))
    }

    fn post<B: Serialize + ?Sized, T: DeserializeOwned>(
        &self,
        segments: &[&str],
        body: &B,
    ) -> Result<T, ClientError> {
        self.send(self.http.post(self.url(segments)).json(body))
    }

    pub fn register_device(&self, req: &RegisterDevice) -> Result<DeviceRegistration, ClientError> {
        self.post(&["v1", "devices"], req)
    }

    pub fn resolve_did(&self, did: &Did) -> Result<DidDocument, ClientError> {
        self.get(&["v1", "dids", did.as_str()])
    }

    pub fn publish_did(&self, doc: &DidDocument) -> Result<Revision, ClientError> {
        let r: PublishResponse = self.post(&["v1", "dids"], doc)?;
        Ok(Revision(r.revision))
    }

    pub fn request_vc_id(&self, owner: &Did) -> Result<VcId, ClientError> {
        let r: VcIdResponse = self.post(
            &["v1", "vc-ids"],
            &VcIdRequest {
                owner_did: owner.clone(),
            },
        )?;
        Ok(r.vc_id)
    }

    pub fn grants(&self, device: &Did) -> Result<u32, ClientError> {
        let r: GrantsResponse = self.get(&["v1", "devices", device.as_str(), "grants"])?;
        Ok(r.active)
    }

    pub fn present(&self, vc: &VerifiableCredential) -> Result<GrantNotice, ClientError> {
        self.post(&["v1", "access"], vc)
    }

    pub fn push_policy(&self, signed: &SignedPolicy) -> Result<OwnerPolicy, ClientError> {
        self.send(
            self.http
                .put(self.url(&["v1", "owners", signed.owner.as_str(), "policy"]))
                .json(signed),
        )
    }

    /// Fetches the records released since the last fetch, signing the
    /// request as `customer`.
    pub fn fetch_data(
        &self,
        signer: &dyn Signer,
        customer: &Did,
        vc_id: &VcId,
        device: &Did,
        as_of: Timestamp,
    ) -> Result<Vec<TelemetryRecord>, ClientError> {
        let claim = AccessClaim {
            action: "data",
            as_of,
            customer,
            device,
            vc_id,
            command: None,
        };
        let signature = claim
            .sign(signer)
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        let mut url = self.url(&[
            "v1",
            "access",
            vc_id.as_str(),
            "devices",
            device.as_str(),
            "data",
        ]);
        url.query_pairs_mut()
            .append_pair("customer", customer.as_str())
            .append_pair("asOf", &as_of.to_string())
            .append_pair("signature", &signature.to_hex());
        self.send(self.http.get(url))
    }

    pub fn send_control(
        &self,
        signer: &dyn Signer,
        customer: &Did,
        vc_id: &VcId,
        device: &Did,
        command: &Fields,
        as_of: Timestamp,
    ) -> Result<Fields, ClientError> {
        let claim = AccessClaim {
            action: "control",
            as_of,
            customer,
            device,
            vc_id,
            command: Some(command),
        };
        let signature = claim
            .sign(signer)
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        let body = ControlRequest {
            customer: customer.clone(),
            as_of,
            command: command.clone(),
            signature,
        };
        self.post(
            &[
                "v1",
                "access",
                vc_id.as_str(),
                "devices",
                device.as_str(),
                "control",
            ],
            &body,
        )
    }

    pub fn ingest(&self, connectivity_id: &str, record: &SignedRecord) -> Result<(), ClientError> {
        let _: serde_json::Value = self.post(&["v1", "telemetry", connectivity_id], record)?;
        Ok(())
    }

    /// Collects the commands queued for `device`, proving possession of its key.
    pub fn drain_commands(
        &self,
        signer: &dyn Signer,
        device: &Did,
        as_of: Timestamp,
    ) -> Result<Vec<Fields>, ClientError> {
        let signature = signer
            .sign(&drain_payload(device, as_of))
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.post(
            &["v1", "devices", device.as_str(), "commands", "drain"],
            &DrainRequest { as_of, signature },
        )
    }

    pub fn clock(&self) -> Result<ClockInfo, ClientError> {
        self.get(&["v1", "clock"])
    }

    pub fn set_clock(&self, now: Timestamp) -> Result<ClockInfo, ClientError> {
        self.post(&["v1", "clock"], &SetClock { now })
    }
}

fn client_error(e: ClientError) -> ExchangeClientError {
    match e {
        ClientError::Connection(s) => ExchangeClientError::Unavailable(s),
        ClientError::Rejected { body, .. } => ExchangeClientError::Rejected(body.error),
        ClientError::Protocol(s) => ExchangeClientError::Rejected(s),
    }
}

impl ExchangeClient for Client {
    fn issue_vc_id(&self, owner: &Did) -> Result<VcId, ExchangeClientError> {
        self.request_vc_id(owner).map_err(client_error)
    }

    fn active_grants(&self, device: &Did) -> Result<u32, ExchangeClientError> {
        self.grants(device).map_err(client_error)
    }
}

impl DidResolver for Client {
    fn resolve(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        match self.resolve_did(did) {
            Ok(doc) => Ok(doc),
            Err(ClientError::Rejected { status, .. })
                if status == StatusCode::NOT_FOUND.as_u16() =>
            {
                Err(IdentityError::NotFound(did.clone()))
            }
            Err(ClientError::Rejected { body, .. }) if body.error == "UnknownMethod" => {
                Err(IdentityError::UnknownMethod(did.method().to_owned()))
            }
            Err(e) => Err(IdentityError::Unavailable(e.to_string())),
        }
    }
}

impl TelemetrySink for Client {
    fn submit(&self, connectivity_id: &str, record: &SignedRecord) -> Result<(), String> {
        self.ingest(connectivity_id, record).map_err(|e| match e {
            ClientError::Rejected { body, .. } => body.error,
            other => other.to_string(),
        })
    }
}
