//! HTTP front of the exchange.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use iotx_core::canonical::canonical_string;
use iotx_core::exchange::{Outbox, Reason, RegisterDevice, SignedPolicy};
use iotx_core::identity::{IdentityError, IdentityHub, Resolver};
use iotx_core::keystore::KeystoreError;
use iotx_core::storage::MemoryStore;
use iotx_core::{
    Clock, Did, DidDocument, DidResolver, Exchange, ExchangeConfig, FilterRegistry, Keystore,
    ManualClock, SignedRecord, SystemClock, Timestamp, VcId, VerifiableCredential,
};

use crate::config::{ClockMode, Config};
use crate::wire::{
    drain_payload, AccessClaim, ClockInfo, ControlRequest, DataQuery, DrainRequest, ErrorBody,
    GrantsResponse, PublishResponse, SetClock, VcIdRequest, VcIdResponse,
};

pub struct AppState {
    pub exchange: Arc<Exchange>,
    pub outbox: Arc<Outbox>,
    manual: Option<ManualClock>,
    max_skew: i64,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("identity hub: {0}")]
    Hub(IdentityError),
    #[error("keystore: {0}")]
    Keystore(KeystoreError),
    #[error("filters: {0}")]
    Filters(String),
    #[error("listen on {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Io(#[from] std::io::Error),
}

impl AppState {
    pub fn build(config: &Config) -> Result<Arc<Self>, ServeError> {
        let (hub, keystore) = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let hub = IdentityHub::open(&dir.join("hub.jsonl")).map_err(ServeError::Hub)?;
                let ks = Keystore::open_from_env(&dir.join("keystore.bin"))
                    .map_err(ServeError::Keystore)?;
                (hub, ks)
            }
            None => (IdentityHub::in_memory(), Keystore::in_memory()),
        };
        let mut filters = FilterRegistry::builtin();
        if let Some(path) = &config.filters {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ServeError::Filters(format!("{}: {e}", path.display())))?;
            filters
                .extend_from_json(&text)
                .map_err(|e| ServeError::Filters(e.to_string()))?;
        }
        let manual = match config.clock {
            ClockMode::Manual => Some(ManualClock::new(
                config.start.unwrap_or_else(Timestamp::now),
            )),
            ClockMode::Real => None,
        };
        let clock: Arc<dyn Clock> = match &manual {
            Some(m) => Arc::new(m.clone()),
            None => Arc::new(SystemClock),
        };
        let outbox = Arc::new(Outbox::new());
        let exchange = Exchange::new(
            ExchangeConfig {
                default_capacity: config.default_capacity,
            },
            Resolver::local(Arc::new(hub)),
            Arc::new(keystore.with_clock(Arc::clone(&clock))),
            Arc::new(MemoryStore::new()),
            Arc::new(filters),
            clock,
            outbox.clone(),
        );
        Ok(Arc::new(Self {
            exchange: Arc::new(exchange),
            outbox,
            manual,
            max_skew: config.max_skew,
        }))
    }

    fn now(&self) -> Timestamp {
        self.exchange.clock().now()
    }

    /// The instant a customer request is judged at. A manual clock takes
    /// the signed `asOf` as given; a real clock uses its own time and only
    /// checks the claim is fresh.
    fn effective_time(&self, as_of: Timestamp) -> Result<Timestamp, Rejection> {
        if self.manual.is_some() {
            return Ok(as_of);
        }
        let now = self.now();
        if (as_of.since(now)).abs() > self.max_skew {
            return Err(Rejection::new(
                StatusCode::UNAUTHORIZED,
                "StaleRequest",
                0,
                format!("asOf {as_of} too far from {now}"),
            ));
        }
        Ok(now)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/devices", post(register_device))
        .route("/v1/devices/{did}/grants", get(device_grants))
        .route("/v1/devices/{did}/commands/drain", post(drain_commands))
        .route("/v1/dids", post(publish_did))
        .route("/v1/dids/{did}", get(resolve_did))
        .route("/v1/vc-ids", post(issue_vc_id))
        .route("/v1/access", post(present))
        .route("/v1/access/{vc_id}/devices/{did}/data", get(access_data))
        .route(
            "/v1/access/{vc_id}/devices/{did}/control",
            post(access_control),
        )
        .route("/v1/telemetry/{connectivity_id}", post(ingest))
        .route("/v1/owners/{did}/policy", put(put_policy))
        .route("/v1/clock", get(get_clock).post(set_clock))
        .fallback(|| async {
            Rejection::new(
                StatusCode::NOT_FOUND,
                "NoSuchEndpoint",
                0,
                "no such endpoint",
            )
        })
        .with_state(state)
}

/// Binds, reports the bound address as a JSON line on stdout, and serves
/// until interrupted.
pub async fn serve(config: Config) -> Result<(), ServeError> {
    let state = AppState::build(&config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.listen.clone(),
            source,
        })?;
    let addr = listener.local_addr()?;
    println!(
        "{}",
        canonical_string(&serde_json::json!({ "listen": addr.to_string() })).expect("plain json")
    );
    if state.manual.is_none() {
        let ex = Arc::clone(&state.exchange);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(30));
            loop {
                tick.tick().await;
                ex.expire_grants(ex.clock().now());
            }
        });
    }
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug)]
pub struct Rejection {
    status: StatusCode,
    body: ErrorBody,
}

impl Rejection {
    fn new(status: StatusCode, token: &str, step: u8, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: token.into(),
                step,
                reason: None,
                message: message.into(),
            },
        }
    }

    fn from_reason<R: Reason>(e: &R) -> Self {
        let status = if e.is_internal() {
            StatusCode::INTERNAL_SERVER_ERROR
        } else {
            status_for(e.token())
        };
        Self::new(status, e.token(), e.step(), e.to_string())
    }

    fn identity(e: &IdentityError) -> Self {
        let status = match e {
            IdentityError::Persistence(_)
            | IdentityError::Signing(_)
            | IdentityError::Encoding(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => status_for(e.token()),
        };
        Self::new(status, e.token(), 1, e.to_string())
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "MalformedRequest", 0, message)
    }
}

fn status_for(token: &str) -> StatusCode {
    match token {
        "NotFound" | "UnknownDevice" | "UnknownVcId" | "GrantNotActive" => StatusCode::NOT_FOUND,
        "DuplicateConnectivityId"
        | "DuplicateSerial"
        | "VcIdAlreadyUsed"
        | "CapacityExceeded"
        | "NonMonotoneTimestamp"
        | "PolicyStale" => StatusCode::CONFLICT,
        "SignatureInvalid"
        | "VerificationFailed"
        | "VcIdIssuerMismatch"
        | "DeviceNotOwnedByIssuer"
        | "PermissionDenied"
        | "DeviceNotInGrant"
        | "OutsideWindow"
        | "UpdateUnauthorized"
        | "ProofInvalid" => StatusCode::FORBIDDEN,
        "PeriodNotElapsed" => StatusCode::TOO_MANY_REQUESTS,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

impl IntoResponse for Rejection {
    fn into_response(self) -> Response {
        canonical(self.status, &self.body)
    }
}

fn canonical<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match canonical_string(body) {
        Ok(text) => (status, [(header::CONTENT_TYPE, "application/json")], text).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

type Reply = Result<Response, Rejection>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Rejection> {
    serde_json::from_slice(body).map_err(|e| Rejection::malformed(e.to_string()))
}

fn did(text: &str) -> Result<Did, Rejection> {
    Did::parse(text).map_err(|e| Rejection::identity(&e))
}

/// Checks a customer's signature over an access claim.
fn authenticate(
    state: &AppState,
    claim: &AccessClaim<'_>,
    signature: &iotx_core::Signature,
) -> Result<(), Rejection> {
    let unauthenticated =
        |m: String| Rejection::new(StatusCode::UNAUTHORIZED, "Unauthenticated", 0, m);
    let doc = state
        .exchange
        .resolve(claim.customer)
        .map_err(|e| unauthenticated(e.to_string()))?;
    if !doc.public_key.verify(&claim.payload(), signature) {
        return Err(unauthenticated(
            "request signature does not verify under the customer key".into(),
        ));
    }
    Ok(())
}

async fn register_device(State(s): State<Arc<AppState>>, body: Bytes) -> Reply {
    let req: RegisterDevice = parse(&body)?;
    let ex = Arc::clone(&s.exchange);
    let reg = tokio::task::spawn_blocking(move || ex.register_device(&req))
        .await
        .map_err(|e| {
            Rejection::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "Internal",
                0,
                e.to_string(),
            )
        })?
        .map_err(|e| Rejection::from_reason(&e))?;
    Ok(canonical(StatusCode::CREATED, &reg))
}

async fn resolve_did(State(s): State<Arc<AppState>>, Path(text): Path<String>) -> Reply {
    let doc = s
        .exchange
        .resolve(&did(&text)?)
        .map_err(|e| Rejection::identity(&e))?;
    Ok(canonical(StatusCode::OK, &doc))
}

async fn publish_did(State(s): State<Arc<AppState>>, body: Bytes) -> Reply {
    let doc: DidDocument = parse(&body)?;
    let id = doc.id.clone();
    let rev = s
        .exchange
        .resolver()
        .publish(doc)
        .map_err(|e| Rejection::identity(&e))?;
    Ok(canonical(
        StatusCode::CREATED,
        &PublishResponse {
            id,
            revision: rev.0,
        },
    ))
}

async fn issue_vc_id(State(s): State<Arc<AppState>>, body: Bytes) -> Reply {
    let req: VcIdRequest = parse(&body)?;
    let vc_id = s
        .exchange
        .issue_vc_id(&req.owner_did)
        .map_err(|e| Rejection::from_reason(&e))?;
    Ok(canonical(StatusCode::CREATED, &VcIdResponse { vc_id }))
}

async fn present(State(s): State<Arc<AppState>>, body: Bytes) -> Reply {
    let vc: VerifiableCredential = parse(&body)?;
    match s.exchange.present_credential(&vc) {
        Ok(notice) => Ok(canonical(StatusCode::CREATED, &notice)),
        Err(e) => {
            let mut r = Rejection::from_reason(&e);
            r.body.reason = e.reason().map(str::to_owned);
            Err(r)
        }
    }
}

async fn access_data(
    State(s): State<Arc<AppState>>,
    Path((vc_id, device)): Path<(String, String)>,
    Query(q): Query<DataQuery>,
) -> Reply {
    let (vc_id, device) = (VcId::new(vc_id), did(&device)?);
    let claim = AccessClaim {
        action: "data",
        as_of: q.as_of,
        customer: &q.customer,
        device: &device,
        vc_id: &vc_id,
        command: None,
    };
    authenticate(&s, &claim, &q.signature)?;
    let at = s.effective_time(q.as_of)?;
    let records = s
        .exchange
        .access_data(&q.customer, &vc_id, &device, at)
        .map_err(|e| access_rejection(&e))?;
    Ok(canonical(StatusCode::OK, &records))
}

fn access_rejection(e: &iotx_core::exchange::AccessError) -> Rejection {
    let mut r = Rejection::from_reason(e);
    if let iotx_core::exchange::AccessError::PeriodNotElapsed { next } = e {
        r.body.reason = Some(next.to_string());
    }
    r
}

async fn access_control(
    State(s): State<Arc<AppState>>,
    Path((vc_id, device)): Path<(String, String)>,
    body: Bytes,
) -> Reply {
    let req: ControlRequest = parse(&body)?;
    let (vc_id, device) = (VcId::new(vc_id), did(&device)?);
    let claim = AccessClaim {
        action: "control",
        as_of: req.as_of,
        customer: &req.customer,
        device: &device,
        vc_id: &vc_id,
        command: Some(&req.command),
    };
    authenticate(&s, &claim, &req.signature)?;
    let at = s.effective_time(req.as_of)?;
    let sent = s
        .exchange
        .access_control(&req.customer, &vc_id, &device, &req.command, at)
        .map_err(|e| access_rejection(&e))?;
    Ok(canonical(StatusCode::ACCEPTED, &sent))
}

async fn ingest(State(s): State<Arc<AppState>>, Path(conn): Path<String>, body: Bytes) -> Reply {
    let record: SignedRecord = parse(&body)?;
    s.exchange
        .ingest_telemetry(&conn, &record)
        .map_err(|e| Rejection::from_reason(&e))?;
    Ok(canonical(
        StatusCode::CREATED,
        &serde_json::json!({ "deviceDid": record.record.device_did, "timestamp": record.record.timestamp }),
    ))
}

async fn put_policy(
    State(s): State<Arc<AppState>>,
    Path(owner): Path<String>,
    body: Bytes,
) -> Reply {
    let signed: SignedPolicy = parse(&body)?;
    if signed.owner != did(&owner)? {
        return Err(Rejection::malformed("policy owner does not match the path"));
    }
    s.exchange
        .set_owner_policy(&signed)
        .map_err(|e| Rejection::from_reason(&e))?;
    Ok(canonical(StatusCode::OK, &signed.policy))
}

async fn device_grants(State(s): State<Arc<AppState>>, Path(device): Path<String>) -> Reply {
    let active = s.exchange.active_grants(&did(&device)?);
    Ok(canonical(StatusCode::OK, &GrantsResponse { active }))
}

async fn drain_commands(
    State(s): State<Arc<AppState>>,
    Path(device): Path<String>,
    body: Bytes,
) -> Reply {
    let req: DrainRequest = parse(&body)?;
    let device = did(&device)?;
    let doc = s
        .exchange
        .resolve(&device)
        .map_err(|e| Rejection::identity(&e))?;
    if !doc
        .public_key
        .verify(&drain_payload(&device, req.as_of), &req.signature)
    {
        return Err(Rejection::new(
            StatusCode::UNAUTHORIZED,
            "Unauthenticated",
            0,
            "device signature does not verify",
        ));
    }
    s.effective_time(req.as_of)?;
    Ok(canonical(StatusCode::OK, &s.outbox.drain(&device)))
}

async fn get_clock(State(s): State<Arc<AppState>>) -> Reply {
    Ok(canonical(
        StatusCode::OK,
        &ClockInfo {
            now: s.now(),
            manual: s.manual.is_some(),
        },
    ))
}

async fn set_clock(State(s): State<Arc<AppState>>, body: Bytes) -> Reply {
    let req: SetClock = parse(&body)?;
    let Some(clock) = &s.manual else {
        return Err(Rejection::new(
            StatusCode::CONFLICT,
            "ClockNotManual",
            0,
            "server runs on the real clock",
        ));
    };
    clock.set(req.now);
    s.exchange.expire_grants(req.now);
    Ok(canonical(
        StatusCode::OK,
        &ClockInfo {
            now: req.now,
            manual: true,
        },
    ))
}
