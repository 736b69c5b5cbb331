use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use iotx::client::{Client, ClientError};
use iotx::config::Config;
use iotx::server;
use iotx_core::canonical::canonical_string;
use iotx_core::devicesim::{parse_fleet, Fleet, FleetClock};
use iotx_core::exchange::{RegisterDevice, SignedPolicy};
use iotx_core::keystore::KeystoreError;
use iotx_core::policy::IssueRejection;
use iotx_core::{
    AccessRequestDraft, AuthorizingParty, Clock, ConnectivityType, DenyPolicy, Did, DidDocument,
    Fields, Keystore, LocalSigner, LookupKey, ManualClock, OwnerAgent, OwnerPolicy, Signer,
    SystemClock, Timestamp, VcId, VerifiableCredential,
};

const EXIT_FAULT: u8 = 1;
const EXIT_REJECTED: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_UNAVAILABLE: u8 = 69;

/// Operator CLI for the IoT exchange. Talks to the service at
/// $IOTX_EXCHANGE_URL (default http://127.0.0.1:8700).
#[derive(Debug, Parser)]
#[command(name = "iotx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the exchange service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    #[command(subcommand)]
    Key(KeyCmd),
    #[command(subcommand)]
    Did(DidCmd),
    #[command(subcommand)]
    Device(DeviceCmd),
    #[command(subcommand)]
    Owner(OwnerCmd),
    #[command(subcommand)]
    Customer(CustomerCmd),
    #[command(subcommand)]
    Sim(SimCmd),
    #[command(subcommand)]
    Clock(ClockCmd),
}

#[derive(Debug, Subcommand)]
enum KeyCmd {
    /// Create a new Ed25519 key file (mode 600).
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum DidCmd {
    /// Create and publish a self-certifying DID for a key file.
    Publish {
        #[arg(long)]
        key: PathBuf,
        /// TYPE=ENDPOINT, repeatable.
        #[arg(long = "service", value_parser = parse_service)]
        services: Vec<(ConnectivityType, String)>,
    },
    Resolve {
        did: Did,
    },
}

#[derive(Debug, Subcommand)]
enum DeviceCmd {
    Register {
        #[arg(long)]
        owner: Did,
        #[arg(long = "type", value_parser = parse_connectivity)]
        kind: ConnectivityType,
        #[arg(long)]
        conn_id: String,
        #[arg(long)]
        serial: String,
        #[arg(long)]
        cloud_key_slot: Option<String>,
    },
    /// Collect commands queued for a device, signing with its stored key.
    Commands {
        #[arg(long)]
        device: Did,
        #[arg(long)]
        keystore: PathBuf,
    },
}

#[derive(Debug, Args)]
struct OwnerArgs {
    #[arg(long)]
    owner: Did,
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    policy: PathBuf,
}

#[derive(Debug, Subcommand)]
enum OwnerCmd {
    /// Run the issuance flow for one access request and print the credential.
    Issue {
        #[command(flatten)]
        owner: OwnerArgs,
        #[arg(long)]
        request: PathBuf,
        /// JSON list of {did, key, deniedDids} for each authorizing party.
        #[arg(long)]
        parties: Option<PathBuf>,
    },
    /// Sign the policy and install it at the exchange.
    PushPolicy {
        #[command(flatten)]
        owner: OwnerArgs,
    },
}

#[derive(Debug, Args)]
struct CustomerArgs {
    #[arg(long, value_parser = |s: &str| Ok::<_, String>(VcId::new(s)))]
    vc_id: VcId,
    #[arg(long)]
    device: Did,
    #[arg(long)]
    customer: Did,
    #[arg(long)]
    key: PathBuf,
    /// Defaults to the exchange clock.
    #[arg(long)]
    as_of: Option<Timestamp>,
}

#[derive(Debug, Subcommand)]
enum CustomerCmd {
    Present {
        #[arg(long)]
        vc: PathBuf,
    },
    Fetch {
        #[command(flatten)]
        access: CustomerArgs,
    },
    Control {
        #[command(flatten)]
        access: CustomerArgs,
        /// JSON object of string or integer fields.
        #[arg(long)]
        command: String,
    },
}

#[derive(Debug, Subcommand)]
enum SimCmd {
    /// Emit telemetry for every fleet device for DURATION seconds.
    Run {
        #[arg(long)]
        fleet: PathBuf,
        #[arg(long)]
        duration: u64,
        /// Keystore holding the devices' keys (the exchange's keystore.bin).
        #[arg(long)]
        keystore: PathBuf,
        /// Defaults to the exchange's clock mode.
        #[arg(long, value_parser = ["manual", "real"])]
        clock: Option<String>,
        /// Manual mode only: start here instead of at the exchange time.
        #[arg(long)]
        start: Option<Timestamp>,
    },
}

#[derive(Debug, Subcommand)]
enum ClockCmd {
    Show,
    /// Move a manual exchange clock.
    Set {
        now: Timestamp,
    },
}

fn parse_connectivity(s: &str) -> Result<ConnectivityType, String> {
    ConnectivityType::ALL
        .into_iter()
        .find(|t| t.as_str() == s)
        .ok_or_else(|| {
            format!(
                "expected one of {:?}",
                ConnectivityType::ALL.map(ConnectivityType::as_str)
            )
        })
}

fn parse_service(s: &str) -> Result<(ConnectivityType, String), String> {
    let (kind, endpoint) = s.split_once('=').ok_or("expected TYPE=ENDPOINT")?;
    let kind = parse_connectivity(kind)?;
    kind.check(endpoint).map_err(|e| e.to_string())?;
    Ok((kind, endpoint.to_owned()))
}

/// How a command failed; each maps to one exit code.
#[derive(Debug)]
enum Failure {
    /// A typed rejection. The token goes to stderr.
    Rejected {
        token: String,
        detail: String,
    },
    Usage(String),
    Unavailable(String),
    Fault(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Rejected { .. } => EXIT_REJECTED,
            Self::Usage(_) => EXIT_USAGE,
            Self::Unavailable(_) => EXIT_UNAVAILABLE,
            Self::Fault(_) => EXIT_FAULT,
        }
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Connection(m) => Self::Unavailable(m),
            ClientError::Rejected { body, .. } => Self::Rejected {
                token: body.error,
                detail: body.message,
            },
            ClientError::Protocol(m) => Self::Fault(m),
        }
    }
}

fn issue_failure(e: IssueRejection) -> Failure {
    match e {
        IssueRejection::ExchangeUnavailable(m) => Failure::Unavailable(m),
        IssueRejection::PartyUnavailable(_) | IssueRejection::Signing(_) => {
            Failure::Fault(e.to_string())
        }
        other => Failure::Rejected {
            token: other.token().to_owned(),
            detail: other.to_string(),
        },
    }
}

type Outcome = Result<(), Failure>;

fn emit<T: Serialize + ?Sized>(value: &T) -> Outcome {
    let text = canonical_string(value).map_err(|e| Failure::Fault(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn load_key(path: &Path) -> Result<LocalSigner, Failure> {
    LocalSigner::load(path).map_err(|e| Failure::Usage(e.to_string()))
}

fn open_keystore(path: &Path) -> Result<Arc<Keystore>, Failure> {
    Keystore::open_from_env(path)
        .map(Arc::new)
        .map_err(|e| match e {
            KeystoreError::Io(_) => Failure::Usage(e.to_string()),
            other => Failure::Fault(other.to_string()),
        })
}

fn client() -> Result<Client, Failure> {
    Client::from_env().map_err(|e| Failure::Usage(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Rejected { token, detail } => eprintln!("{token}\n{detail}"),
                Failure::Usage(m) => eprintln!("usage: {m}"),
                Failure::Unavailable(m) => eprintln!("unavailable: {m}"),
                Failure::Fault(m) => eprintln!("error: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Serve { config } => serve(config.as_deref()),
        Command::Key(KeyCmd::Gen { out }) => {
            let signer = LocalSigner::generate();
            signer
                .save(&out)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            emit(&serde_json::json!({ "publicKey": signer.public_key() }))
        }
        Command::Did(cmd) => did(cmd),
        Command::Device(cmd) => device(cmd),
        Command::Owner(cmd) => owner(cmd),
        Command::Customer(cmd) => customer(cmd),
        Command::Sim(SimCmd::Run {
            fleet,
            duration,
            keystore,
            clock,
            start,
        }) => sim_run(&fleet, duration, &keystore, clock.as_deref(), start),
        Command::Clock(ClockCmd::Show) => emit(&client()?.clock()?),
        Command::Clock(ClockCmd::Set { now }) => emit(&client()?.set_clock(now)?),
    }
}

fn serve(path: Option<&Path>) -> Outcome {
    let config = Config::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Fault(e.to_string()))?;
    rt.block_on(server::serve(config))
        .map_err(|e| Failure::Fault(e.to_string()))
}

fn did(cmd: DidCmd) -> Outcome {
    let c = client()?;
    match cmd {
        DidCmd::Publish { key, services } => {
            let signer = load_key(&key)?;
            let created = c.clock()?.now;
            let doc = DidDocument::build(
                iotx_core::identity::LOCAL_METHOD,
                &signer,
                &services,
                created,
            )
            .map_err(|e| Failure::Usage(e.to_string()))?;
            let rev = c.publish_did(&doc)?;
            emit(&serde_json::json!({ "id": doc.id, "revision": rev.0 }))
        }
        DidCmd::Resolve { did } => emit(&c.resolve_did(&did)?),
    }
}

fn device(cmd: DeviceCmd) -> Outcome {
    let c = client()?;
    match cmd {
        DeviceCmd::Register {
            owner,
            kind,
            conn_id,
            serial,
            cloud_key_slot,
        } => {
            let req = RegisterDevice {
                owner_did: owner,
                connectivity_type: kind,
                connectivity_id: conn_id,
                device_unique_id: serial,
                cloud_key_slot,
            };
            emit(&c.register_device(&req)?)
        }
        DeviceCmd::Commands { device, keystore } => {
            let ks = open_keystore(&keystore)?;
            let mapping = ks
                .lookup_by(LookupKey::Did(&device))
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let signer = ks
                .signer(&mapping.key_handle)
                .map_err(|e| Failure::Fault(e.to_string()))?;
            let now = c.clock()?.now;
            emit(&c.drain_commands(&signer, &device, now)?)
        }
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct PartyFile {
    did: Did,
    key: PathBuf,
    #[serde(default)]
    denied_dids: std::collections::BTreeSet<Did>,
}

fn signed_policy(
    c: &Client,
    args: &OwnerArgs,
) -> Result<(LocalSigner, SignedPolicy, Timestamp), Failure> {
    let signer = load_key(&args.key)?;
    let text = std::fs::read_to_string(&args.policy)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.policy.display())))?;
    let policy = OwnerPolicy::from_json(&text)
        .map_err(|e| Failure::Usage(format!("{}: {e}", args.policy.display())))?;
    let now = c.clock()?.now;
    let signed = SignedPolicy::sign(args.owner.clone(), now, policy, &signer)
        .map_err(|e| Failure::Fault(e.to_string()))?;
    Ok((signer, signed, now))
}

fn owner(cmd: OwnerCmd) -> Outcome {
    let c = client()?;
    match cmd {
        OwnerCmd::PushPolicy { owner } => {
            let (_, signed, _) = signed_policy(&c, &owner)?;
            emit(&c.push_policy(&signed)?)
        }
        OwnerCmd::Issue {
            owner,
            request,
            parties,
        } => {
            let draft: AccessRequestDraft = read_json(&request)?;
            let party_files: Vec<PartyFile> = match &parties {
                Some(p) => read_json(p)?,
                None => Vec::new(),
            };
            let mut directory = Vec::with_capacity(party_files.len());
            for p in party_files {
                let signer = load_key(&p.key)?;
                directory.push(AuthorizingParty::new(
                    p.did,
                    DenyPolicy {
                        denied_dids: p.denied_dids,
                    },
                    Box::new(signer),
                ));
            }
            // The exchange enforces the same policy the agent issues under.
            let (signer, signed, now) = signed_policy(&c, &owner)?;
            c.push_policy(&signed)?;
            let agent = OwnerAgent::new(
                owner.owner,
                Arc::new(signer),
                signed.policy,
                Arc::new(ManualClock::new(now)),
            );
            let vc = agent
                .owner_issue_flow(&draft, &c, &c, &directory)
                .map_err(issue_failure)?;
            emit(&vc)
        }
    }
}

fn customer(cmd: CustomerCmd) -> Outcome {
    let c = client()?;
    match cmd {
        CustomerCmd::Present { vc } => {
            let vc: VerifiableCredential = read_json(&vc)?;
            emit(&c.present(&vc)?)
        }
        CustomerCmd::Fetch { access: a } => {
            let signer = load_key(&a.key)?;
            let as_of = match a.as_of {
                Some(t) => t,
                None => c.clock()?.now,
            };
            emit(&c.fetch_data(&signer, &a.customer, &a.vc_id, &a.device, as_of)?)
        }
        CustomerCmd::Control { access: a, command } => {
            let command: Fields = serde_json::from_str(&command)
                .map_err(|e| Failure::Usage(format!("--command: {e}")))?;
            let signer = load_key(&a.key)?;
            let as_of = match a.as_of {
                Some(t) => t,
                None => c.clock()?.now,
            };
            emit(&c.send_control(&signer, &a.customer, &a.vc_id, &a.device, &command, as_of)?)
        }
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct SimReport {
    start: Timestamp,
    duration: u64,
    accepted: std::collections::BTreeMap<Did, u64>,
    failures: Vec<SimFailure>,
}

#[derive(Serialize)]
struct SimFailure {
    device: Did,
    error: String,
}

fn sim_run(
    fleet: &Path,
    duration: u64,
    keystore: &Path,
    mode: Option<&str>,
    start: Option<Timestamp>,
) -> Outcome {
    let c = client()?;
    let text = std::fs::read_to_string(fleet)
        .map_err(|e| Failure::Usage(format!("{}: {e}", fleet.display())))?;
    let specs =
        parse_fleet(&text).map_err(|e| Failure::Usage(format!("{}: {e}", fleet.display())))?;
    let info = c.clock()?;
    let manual = match mode {
        Some(m) => m == "manual",
        None => info.manual,
    };
    if start.is_some() && !manual {
        return Err(Failure::Usage("--start needs the manual clock".into()));
    }
    let start = start.unwrap_or(info.now);
    let ks = open_keystore(keystore)?;
    let fleet = Fleet::from_keystore(ks, specs, start).map_err(|e| Failure::Rejected {
        token: e.token().to_owned(),
        detail: e.to_string(),
    })?;
    let report = if manual {
        let clock = ManualClock::new(start);
        let report = fleet.run(duration, FleetClock::Manual(&clock), &c);
        if info.manual {
            c.set_clock(clock.now())?;
        }
        report
    } else {
        fleet.run(duration, FleetClock::Real(&SystemClock), &c)
    };
    let failed = report.failures.len();
    emit(&SimReport {
        start,
        duration,
        accepted: report.accepted,
        failures: report
            .failures
            .into_iter()
            .map(|(device, error)| SimFailure { device, error })
            .collect(),
    })?;
    if failed > 0 {
        return Err(Failure::Rejected {
            token: "TelemetryRejected".into(),
            detail: format!("{failed} records rejected"),
        });
    }
    Ok(())
}
