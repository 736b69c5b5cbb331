use std::sync::Arc;

use super::*;
use crate::credential::{sign_credential, AccessRequestSubject, CredentialBody, Permissions};
use crate::crypto::{LocalSigner, Signer};
use crate::identity::IdentityHub;
use crate::policy::{AccessRequestDraft, FilterSpecEntry, OwnerAgent};
use crate::privacy::REDACTED;
use crate::storage::MemoryStore;
use crate::telemetry::{fields, FieldValue};
use crate::time::{ManualClock, Period};

const T0: i64 = 1_569_888_000; // 2019-10-01T00:00:00Z

struct Harness {
    ex: Arc<Exchange>,
    clock: ManualClock,
    outbox: Arc<Outbox>,
    owner_key: Arc<LocalSigner>,
    owner: Did,
    customer_key: LocalSigner,
    customer: Did,
}

fn publish(r: &Resolver, s: &LocalSigner) -> Did {
    r.create_did("iotx", &s.public_key(), &[], s, Timestamp::from_unix(T0 - 86_400)).unwrap().id
}

fn harness() -> Harness {
    let resolver = Resolver::local(Arc::new(IdentityHub::in_memory()));
    let clock = ManualClock::new(Timestamp::from_unix(T0));
    let outbox = Arc::new(Outbox::new());
    let ex = Arc::new(Exchange::new(
        ExchangeConfig::default(),
        resolver.clone(),
        Arc::new(Keystore::in_memory()),
        Arc::new(MemoryStore::new()),
        Arc::new(FilterRegistry::builtin()),
        Arc::new(clock.clone()),
        outbox.clone(),
    ));
    let owner_key = Arc::new(LocalSigner::generate());
    let owner = publish(&resolver, &owner_key);
    let customer_key = LocalSigner::generate();
    let customer = publish(&resolver, &customer_key);
    Harness { ex, clock, outbox, owner_key, owner, customer_key, customer }
}

fn lora_eui(n: u32) -> String {
    format!("A81758FFFE{n:06X}")
}

impl Harness {
    fn register_lora(&self, n: u32) -> DeviceRegistration {
        self.ex
            .register_device(&RegisterDevice {
                owner_did: self.owner.clone(),
                connectivity_type: ConnectivityType::LoRaDeviceEUI,
                connectivity_id: lora_eui(n),
                device_unique_id: format!("SN-{n}"),
                cloud_key_slot: None,
            })
            .unwrap()
    }

    fn agent(&self, policy: OwnerPolicy) -> OwnerAgent {
        OwnerAgent::new(self.owner.clone(), self.owner_key.clone(), policy, self.ex.clock().clone())
    }

    fn push_policy(&self, policy: &OwnerPolicy, issued_at: i64) -> Result<(), OwnerPolicyError> {
        let signed = SignedPolicy::sign(
            self.owner.clone(),
            Timestamp::from_unix(issued_at),
            policy.clone(),
            self.owner_key.as_ref(),
        )
        .unwrap();
        self.ex.set_owner_policy(&signed)
    }

    fn draft(&self, devices: &[Did], permissions: &[Permission]) -> AccessRequestDraft {
        AccessRequestDraft {
            customer_did: self.customer.clone(),
            device_ids: devices.to_vec(),
            start: Timestamp::from_unix(T0),
            end: "2019-10-30:23:59:59".parse().unwrap(),
            period: Period::from_secs(21_600),
            permissions: permissions.iter().copied().collect(),
        }
    }

    fn issue(&self, policy: OwnerPolicy, devices: &[Did], permissions: &[Permission]) -> VerifiableCredential {
        self.agent(policy)
            .owner_issue_flow(&self.draft(devices, permissions), self.ex.as_ref(), self.ex.resolver(), &Vec::new())
            .unwrap()
    }

    fn ingest(&self, reg: &DeviceRegistration, at: i64, f: Fields) {
        let handle = self.ex.keystore().lookup_by(LookupKey::Did(&reg.did)).unwrap().key_handle;
        let signer = self.ex.keystore().signer(&handle).unwrap();
        let rec = TelemetryRecord { device_did: reg.did.clone(), timestamp: Timestamp::from_unix(at), fields: f };
        self.ex.ingest_telemetry(&reg.connectivity_id, &rec.sign(&signer).unwrap()).unwrap();
    }
}

fn reading() -> Fields {
    fields([("temp", "22.5"), ("lat", "1.3521"), ("lon", "103.8198"), ("loraId", "A81758FFFE03AB42")])
}

fn redacting_policy(devices: &[Did]) -> OwnerPolicy {
    OwnerPolicy {
        filter_spec: vec![FilterSpecEntry {
            device_ids: devices.iter().cloned().collect(),
            filter_chain: vec!["redact_location".into(), "redact_device_id".into()],
        }],
        ..OwnerPolicy::default()
    }
}

#[test]
fn register_ethernet_binds_service() {
    let h = harness();
    let reg = h
        .ex
        .register_device(&RegisterDevice {
            owner_did: h.owner.clone(),
            connectivity_type: ConnectivityType::EthernetMacAddress,
            connectivity_id: "00:0a:95:9d:68:16".into(),
            device_unique_id: "SN-1".into(),
            cloud_key_slot: None,
        })
        .unwrap();
    let doc = h.ex.resolve(&reg.did).unwrap();
    let svc = doc.service(ConnectivityType::EthernetMacAddress).unwrap();
    assert_eq!(svc.service_endpoint, "00:0a:95:9d:68:16");
    let m = h.ex.keystore().lookup_by(LookupKey::DeviceUniqueId("SN-1")).unwrap();
    assert_eq!(m.did, reg.did);
    assert_eq!(h.ex.keystore().key_record(&m.key_handle).unwrap().public_key, doc.public_key);
    assert_eq!(h.ex.registration(&reg.did), Some(reg));
}

#[test]
fn register_lora_and_lookup() {
    let h = harness();
    let reg = h.register_lora(7);
    let doc = h.ex.resolve(&reg.did).unwrap();
    assert_eq!(doc.service(ConnectivityType::LoRaDeviceEUI).unwrap().service_endpoint, lora_eui(7));
    let by_conn = h.ex.keystore().lookup_by(LookupKey::ConnectivityId(&lora_eui(7))).unwrap();
    let by_did = h.ex.keystore().lookup_by(LookupKey::Did(&reg.did)).unwrap();
    assert_eq!(by_conn, by_did);
}

#[test]
fn duplicate_registration_leaves_no_residue() {
    let h = harness();
    h.register_lora(1);
    let keys_before = h.ex.keystore().mapping_count();
    let mut req = RegisterDevice {
        owner_did: h.owner.clone(),
        connectivity_type: ConnectivityType::LoRaDeviceEUI,
        connectivity_id: lora_eui(1),
        device_unique_id: "SN-other".into(),
        cloud_key_slot: None,
    };
    assert!(matches!(h.ex.register_device(&req), Err(RegisterError::DuplicateConnectivityId { .. })));
    req.connectivity_id = lora_eui(2);
    req.device_unique_id = "SN-1".into();
    assert!(matches!(h.ex.register_device(&req), Err(RegisterError::DuplicateSerial(_))));
    assert_eq!(h.ex.keystore().mapping_count(), keys_before);
}

#[test]
fn register_rejects_bad_owner_and_syntax() {
    let h = harness();
    let mut req = RegisterDevice {
        owner_did: Did::new("iotx", "ghost").unwrap(),
        connectivity_type: ConnectivityType::WiFiMacAddress,
        connectivity_id: "00:0a:95:9d:68:17".into(),
        device_unique_id: "SN-9".into(),
        cloud_key_slot: None,
    };
    assert!(matches!(h.ex.register_device(&req), Err(RegisterError::OwnerUnresolvable(_))));
    req.owner_did = h.owner.clone();
    req.connectivity_id = "00-0a-95-9d-68-17".into();
    let err = h.ex.register_device(&req).unwrap_err();
    assert_eq!(err.token(), "ServiceSyntaxError");
    assert_eq!(h.ex.keystore().mapping_count(), 0);
}

#[test]
fn vc_ids_are_fresh_and_recorded() {
    let h = harness();
    let a = h.ex.issue_vc_id(&h.owner).unwrap();
    let b = h.ex.issue_vc_id(&h.owner).unwrap();
    assert_ne!(a, b);
    let entry = h.ex.ledger_entry(&a).unwrap();
    assert!(!entry.consumed);
    assert_eq!(entry.issued_to, h.owner);
    let ghost = Did::new("iotx", "ghost").unwrap();
    assert_eq!(h.ex.issue_vc_id(&ghost), Err(VcIdError::OwnerUnresolvable(ghost)));
}

#[test]
fn privacy_grant_redacts() {
    let h = harness();
    let d = h.register_lora(1);
    let policy = redacting_policy(std::slice::from_ref(&d.did));
    h.push_policy(&policy, T0).unwrap();
    let vc = h.issue(policy, std::slice::from_ref(&d.did), &[Permission::Data]);
    assert!(vc.credential_subject.privacy_preserving);

    let notice = h.ex.present_credential(&vc).unwrap();
    assert_eq!(notice.filter_chains[&d.did], ["redact_location", "redact_device_id"]);
    assert!(h.ex.ledger_entry(&vc.vc_id).unwrap().consumed);
    assert_eq!(h.ex.active_grants(&d.did), 1);

    h.ingest(&d, T0 + 60, reading());
    let out = h.ex.access_data(&h.customer, &vc.vc_id, &d.did, Timestamp::from_unix(T0 + 120)).unwrap();
    assert_eq!(out.len(), 1);
    let f = &out[0].fields;
    assert_eq!(f["temp"], FieldValue::from("22.5"));
    for k in ["lat", "lon", "loraId"] {
        assert_eq!(f[k], FieldValue::from(REDACTED), "{k}");
    }
}

#[test]
fn second_presentation_is_rejected() {
    let h = harness();
    let d = h.register_lora(1);
    let vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    h.ex.present_credential(&vc).unwrap();
    let err = h.ex.present_credential(&vc).unwrap_err();
    assert_eq!(err, PresentError::VcIdAlreadyUsed);
    assert_eq!(err.step(), 2);
    assert_eq!(h.ex.active_grants(&d.did), 1);
}

fn self_signed(h: &Harness, vc_id: VcId, devices: &[Did]) -> VerifiableCredential {
    let body = CredentialBody {
        vc_id,
        issuer: h.owner.clone(),
        issuance_date: Timestamp::from_unix(T0),
        credential_subject: AccessRequestSubject {
            id: h.customer.clone(),
            device_ids: devices.to_vec(),
            start: Timestamp::from_unix(T0),
            end: Timestamp::from_unix(T0 + 86_400),
            period: Period::from_secs(60),
            permissions: Permissions::from([Permission::Data]),
            privacy_preserving: false,
        },
    };
    sign_credential(body, vec![], h.owner_key.as_ref(), h.ex.resolver()).unwrap()
}

#[test]
fn invented_vc_id_is_unknown() {
    let h = harness();
    let d = h.register_lora(1);
    let vc = self_signed(&h, VcId::new("0123456789abcdef0123456789abcdef"), std::slice::from_ref(&d.did));
    assert_eq!(h.ex.present_credential(&vc), Err(PresentError::UnknownVcId));
}

#[test]
fn vc_id_of_another_owner() {
    let h = harness();
    let d = h.register_lora(1);
    let other = LocalSigner::generate();
    let other_did = publish(h.ex.resolver(), &other);
    let id = h.ex.issue_vc_id(&other_did).unwrap();
    let vc = self_signed(&h, id, std::slice::from_ref(&d.did));
    assert_eq!(h.ex.present_credential(&vc), Err(PresentError::VcIdIssuerMismatch));
}

#[test]
fn tampered_credential_fails_verification() {
    let h = harness();
    let d = h.register_lora(1);
    let mut vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    vc.credential_subject.permissions.insert(Permission::Control);
    let err = h.ex.present_credential(&vc).unwrap_err();
    assert_eq!(err.token(), "VerificationFailed");
    assert_eq!(err.reason(), Some("ProofInvalid"));
    assert!(!h.ex.ledger_entry(&vc.vc_id).unwrap().consumed);
}

#[test]
fn foreign_device_is_rejected() {
    let h = harness();
    let stranger = LocalSigner::generate();
    let stranger_did = publish(h.ex.resolver(), &stranger);
    let id = h.ex.issue_vc_id(&h.owner).unwrap();
    let vc = self_signed(&h, id.clone(), std::slice::from_ref(&stranger_did));
    assert_eq!(h.ex.present_credential(&vc), Err(PresentError::DeviceNotOwnedByIssuer(stranger_did)));
    assert!(!h.ex.ledger_entry(&id).unwrap().consumed);
}

#[test]
fn capacity_failure_consumes_id() {
    let h = harness();
    let d = h.register_lora(1);
    let mut policy = OwnerPolicy::default();
    policy.device_capacity.insert(d.did.clone(), 1);
    h.push_policy(&policy, T0).unwrap();
    let first = self_signed(&h, h.ex.issue_vc_id(&h.owner).unwrap(), std::slice::from_ref(&d.did));
    let second = self_signed(&h, h.ex.issue_vc_id(&h.owner).unwrap(), std::slice::from_ref(&d.did));
    h.ex.present_credential(&first).unwrap();
    assert_eq!(h.ex.present_credential(&second), Err(PresentError::CapacityExceeded(d.did.clone())));
    assert!(h.ex.ledger_entry(&second.vc_id).unwrap().consumed);
    assert_eq!(h.ex.active_grants(&d.did), 1);
}

#[test]
fn period_boundary() {
    let h = harness();
    let d = h.register_lora(1);
    let vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    h.ex.present_credential(&vc).unwrap();
    let at = |s: i64| Timestamp::from_unix(T0 + s);
    h.ex.access_data(&h.customer, &vc.vc_id, &d.did, at(0)).unwrap();
    assert_eq!(
        h.ex.access_data(&h.customer, &vc.vc_id, &d.did, at(21_599)),
        Err(AccessError::PeriodNotElapsed { next: at(21_600) })
    );
    h.ex.access_data(&h.customer, &vc.vc_id, &d.did, at(21_600)).unwrap();
    let late: Timestamp = "2019-10-31T00:00:00Z".parse().unwrap();
    assert_eq!(h.ex.access_data(&h.customer, &vc.vc_id, &d.did, late), Err(AccessError::OutsideWindow));
}

#[test]
fn records_since_last_access() {
    let h = harness();
    let d = h.register_lora(1);
    let vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    h.ex.present_credential(&vc).unwrap();
    for t in [-10, 0, 100, 21_600, 21_700] {
        h.ingest(&d, T0 + t, reading());
    }
    let stamps = |v: Vec<TelemetryRecord>| v.iter().map(|r| r.timestamp.unix() - T0).collect::<Vec<_>>();
    let first = h.ex.access_data(&h.customer, &vc.vc_id, &d.did, Timestamp::from_unix(T0 + 200)).unwrap();
    assert_eq!(stamps(first), [0, 100]);
    let second = h.ex.access_data(&h.customer, &vc.vc_id, &d.did, Timestamp::from_unix(T0 + 21_800)).unwrap();
    assert_eq!(stamps(second), [21_600, 21_700]);
    // Without a privacy flag the stream is untouched.
    assert!(h.ex.grant(&vc.vc_id).unwrap().filter_chains.is_empty());
}

#[test]
fn access_gate_order() {
    let h = harness();
    let d = h.register_lora(1);
    let other = h.register_lora(2);
    let vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    let now = Timestamp::from_unix(T0 + 10);
    assert_eq!(h.ex.access_data(&h.customer, &vc.vc_id, &d.did, now), Err(AccessError::GrantNotActive));
    h.ex.present_credential(&vc).unwrap();
    assert_eq!(
        h.ex.access_data(&h.customer, &vc.vc_id, &other.did, now),
        Err(AccessError::DeviceNotInGrant(other.did.clone()))
    );
    assert_eq!(h.ex.access_data(&h.owner, &vc.vc_id, &d.did, now), Err(AccessError::PermissionDenied));
    let cmd = fields([("led", "on")]);
    assert_eq!(h.ex.access_control(&h.customer, &vc.vc_id, &d.did, &cmd, now), Err(AccessError::PermissionDenied));
    assert_eq!(
        h.ex.access_data(&h.customer, &vc.vc_id, &d.did, Timestamp::from_unix(T0 - 1)),
        Err(AccessError::OutsideWindow)
    );
}

#[test]
fn control_reaches_device_queue() {
    let h = harness();
    let d = h.register_lora(1);
    let other = h.register_lora(2);
    let policy = redacting_policy(std::slice::from_ref(&d.did));
    h.push_policy(&policy, T0).unwrap();
    let vc = h.issue(policy, std::slice::from_ref(&d.did), &[Permission::Control]);
    h.ex.present_credential(&vc).unwrap();
    let cmd = fields([("setpoint", "21.0"), ("location", "lab 3")]);
    let now = Timestamp::from_unix(T0 + 5);
    let sent = h.ex.access_control(&h.customer, &vc.vc_id, &d.did, &cmd, now).unwrap();
    assert_eq!(sent["location"], FieldValue::from(REDACTED));
    assert_eq!(h.outbox.drain(&d.did), [sent]);
    assert_eq!(
        h.ex.access_control(&h.customer, &vc.vc_id, &other.did, &cmd, now),
        Err(AccessError::DeviceNotInGrant(other.did.clone()))
    );
    assert!(matches!(
        h.ex.access_control(&h.customer, &vc.vc_id, &d.did, &cmd, now.plus(1)),
        Err(AccessError::PeriodNotElapsed { .. })
    ));
}

#[test]
fn ingestion_checks() {
    let h = harness();
    let d = h.register_lora(1);
    h.ingest(&d, T0 + 10, reading());
    let rec = TelemetryRecord { device_did: d.did.clone(), timestamp: Timestamp::from_unix(T0 + 20), fields: reading() };

    let wrong = rec.clone().sign(&LocalSigner::generate()).unwrap();
    assert_eq!(h.ex.ingest_telemetry(&d.connectivity_id, &wrong), Err(IngestError::SignatureInvalid));

    let handle = h.ex.keystore().lookup_by(LookupKey::Did(&d.did)).unwrap().key_handle;
    let signer = h.ex.keystore().signer(&handle).unwrap();
    let old = TelemetryRecord { timestamp: Timestamp::from_unix(T0 + 5), ..rec.clone() }.sign(&signer).unwrap();
    assert_eq!(h.ex.ingest_telemetry(&d.connectivity_id, &old), Err(IngestError::NonMonotoneTimestamp));

    let good = rec.sign(&signer).unwrap();
    assert!(matches!(h.ex.ingest_telemetry(&lora_eui(99), &good), Err(IngestError::UnknownDevice(_))));
    h.ex.ingest_telemetry(&d.connectivity_id, &good).unwrap();
    let stored = h.ex.store().scan(&d.did, Bound::Unbounded, Bound::Unbounded);
    assert_eq!(stored.len(), 2);
    assert_eq!(stored[1], good.record);
}

#[test]
fn expiry() {
    let h = harness();
    assert_eq!(h.ex.expire_grants(Timestamp::from_unix(T0)), 0);
    let d = h.register_lora(1);
    let vc = self_signed(&h, h.ex.issue_vc_id(&h.owner).unwrap(), std::slice::from_ref(&d.did));
    h.ex.present_credential(&vc).unwrap();
    let end = vc.credential_subject.end;
    assert_eq!(h.ex.expire_grants(end), 0);
    assert_eq!(h.ex.expire_grants(end.plus(1)), 1);
    assert_eq!(h.ex.expire_grants(end.plus(2)), 0);
    assert_eq!(h.ex.grant(&vc.vc_id).unwrap().state, GrantState::Expired);
    assert_eq!(h.ex.active_grants(&d.did), 0);
    assert_eq!(
        h.ex.access_data(&h.customer, &vc.vc_id, &d.did, end),
        Err(AccessError::GrantNotActive)
    );
}

#[test]
fn owner_policy_upload() {
    let h = harness();
    let policy = OwnerPolicy::default();
    h.push_policy(&policy, T0 + 1).unwrap();
    assert_eq!(h.push_policy(&policy, T0), Err(OwnerPolicyError::Stale));
    h.push_policy(&policy, T0 + 1).unwrap();
    h.push_policy(&policy, T0 + 2).unwrap();

    let forged = SignedPolicy::sign(h.owner.clone(), Timestamp::from_unix(T0 + 5), policy.clone(), &h.customer_key).unwrap();
    assert_eq!(h.ex.set_owner_policy(&forged), Err(OwnerPolicyError::SignatureInvalid));

    let bad = OwnerPolicy {
        filter_spec: vec![FilterSpecEntry { device_ids: Default::default(), filter_chain: vec!["nope".into()] }],
        ..OwnerPolicy::default()
    };
    assert!(matches!(h.push_policy(&bad, T0 + 9), Err(OwnerPolicyError::Invalid(_))));
}

#[test]
fn concurrent_presentations_single_winner() {
    let h = harness();
    let d = h.register_lora(1);
    let vc = h.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), &[Permission::Data]);
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..16).map(|_| s.spawn(|| h.ex.present_credential(&vc))).collect();
        handles.into_iter().map(|j| j.join().unwrap()).collect()
    });
    assert_eq!(results.iter().filter(|r| r.is_ok()).count(), 1);
    assert!(results.iter().filter_map(|r| r.as_ref().err()).all(|e| *e == PresentError::VcIdAlreadyUsed));
    assert_eq!(h.ex.active_grants(&d.did), 1);
}

#[test]
fn time_flows_from_clock() {
    let h = harness();
    h.clock.advance(3600);
    let reg = h.register_lora(1);
    assert_eq!(reg.registered_at, Timestamp::from_unix(T0 + 3600));
}
