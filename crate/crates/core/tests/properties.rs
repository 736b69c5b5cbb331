//! Property tests for the cross-module invariants.

use std::collections::BTreeSet;
use std::sync::{Arc, Barrier};

use proptest::collection::{btree_map, btree_set, vec};
use proptest::prelude::*;

use iotx_core::devicesim::{DeviceSpec, Profile, SimDevice};
use iotx_core::exchange::{AccessError, Outbox, PresentError, RegisterDevice, SignedPolicy};
use iotx_core::identity::{derive_method_specific_id, IdentityError};
use iotx_core::policy::{filter_chain_for, FilterSpecEntry};
use iotx_core::privacy::REDACTED;
use iotx_core::storage::MemoryStore;
use iotx_core::*;

const T: i64 = 1_569_888_000;

fn publish(r: &Resolver, s: &LocalSigner) -> Did {
    r.create_did("iotx", &s.public_key(), &[], s, Timestamp::from_unix(T - 86_400)).unwrap().id
}

struct World {
    ex: Arc<Exchange>,
    owner_key: Arc<LocalSigner>,
    owner: Did,
    customer: Did,
}

fn world() -> World {
    let resolver = Resolver::local(Arc::new(IdentityHub::in_memory()));
    let ex = Arc::new(Exchange::new(
        ExchangeConfig::default(),
        resolver.clone(),
        Arc::new(Keystore::in_memory()),
        Arc::new(MemoryStore::new()),
        Arc::new(FilterRegistry::builtin()),
        Arc::new(ManualClock::new(Timestamp::from_unix(T))),
        Arc::new(Outbox::new()),
    ));
    let owner_key = Arc::new(LocalSigner::generate());
    let owner = publish(&resolver, &owner_key);
    let customer = publish(&resolver, &LocalSigner::generate());
    World { ex, owner_key, owner, customer }
}

impl World {
    fn register(&self, n: u32) -> DeviceRegistration {
        self.ex
            .register_device(&RegisterDevice {
                owner_did: self.owner.clone(),
                connectivity_type: ConnectivityType::LoRaDeviceEUI,
                connectivity_id: format!("A81758FFFE{n:06X}"),
                device_unique_id: format!("SN-{n}"),
                cloud_key_slot: None,
            })
            .unwrap()
    }

    fn push_policy(&self, policy: &OwnerPolicy, at: i64) {
        let signed =
            SignedPolicy::sign(self.owner.clone(), Timestamp::from_unix(at), policy.clone(), self.owner_key.as_ref())
                .unwrap();
        self.ex.set_owner_policy(&signed).unwrap();
    }

    fn issue(&self, policy: OwnerPolicy, devices: &[Did], period: u64, end: i64) -> VerifiableCredential {
        let draft = AccessRequestDraft {
            customer_did: self.customer.clone(),
            device_ids: devices.to_vec(),
            start: Timestamp::from_unix(T),
            end: Timestamp::from_unix(end),
            period: Period::from_secs(period),
            permissions: [Permission::Data].into(),
        };
        let agent = OwnerAgent::new(self.owner.clone(), self.owner_key.clone(), policy, self.ex.clock().clone());
        agent.owner_issue_flow(&draft, self.ex.as_ref(), self.ex.resolver(), &Vec::new()).unwrap()
    }

    fn ingest(&self, reg: &DeviceRegistration, at: i64, fields: Fields) {
        let key = self.ex.keystore().lookup_by(LookupKey::Did(&reg.did)).unwrap().key_handle;
        let signer = self.ex.keystore().signer(&key).unwrap();
        let rec = TelemetryRecord { device_did: reg.did.clone(), timestamp: Timestamp::from_unix(at), fields };
        self.ex.ingest_telemetry(&reg.connectivity_id, &rec.sign(&signer).unwrap()).unwrap();
    }
}

fn field_name() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("temp".to_owned()),
        Just("lat".to_owned()),
        Just("lon".to_owned()),
        Just("location".to_owned()),
        Just("loraId".to_owned()),
        Just("macAddress".to_owned()),
        Just("deviceSerial".to_owned()),
        "[a-z]{1,6}",
    ]
}

fn field_value() -> impl Strategy<Value = FieldValue> {
    prop_oneof!["[0-9a-z.*-]{0,8}".prop_map(FieldValue::Text), any::<i64>().prop_map(FieldValue::Integer)]
}

fn record_fields() -> impl Strategy<Value = Fields> {
    btree_map(field_name(), field_value(), 0..8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn digest_is_deterministic(seed in any::<[u8; 32]>(), created in 0i64..4_000_000_000) {
        let k = LocalSigner::from_seed(seed);
        let at = Timestamp::from_unix(created);
        let a = DidDocument::build("iotx", &k, &[], at).unwrap();
        let b = DidDocument::build("iotx", &k, &[], at).unwrap();
        prop_assert_eq!(&a.id, &b.id);
        prop_assert_eq!(a.id.method_specific_id(), derive_method_specific_id(&k.public_key(), at));
    }

    #[test]
    fn resolve_returns_created_document(seed in any::<[u8; 32]>(), eui in "[0-9A-F]{16}", created in 0i64..4_000_000_000) {
        let r = Resolver::local(Arc::new(IdentityHub::in_memory()));
        let k = LocalSigner::from_seed(seed);
        let doc = r
            .create_did("iotx", &k.public_key(), &[(ConnectivityType::LoRaDeviceEUI, eui)], &k, Timestamp::from_unix(created))
            .unwrap();
        let got = r.resolve(&doc.id).unwrap();
        prop_assert_eq!(got.to_canonical_string(), doc.to_canonical_string());
    }

    #[test]
    fn only_the_key_holder_changes_a_document(
        owner_seed in any::<[u8; 32]>(),
        attacker_seed in any::<[u8; 32]>(),
        mac in "([0-9a-f]{2}:){5}[0-9a-f]{2}",
    ) {
        prop_assume!(owner_seed != attacker_seed);
        let hub = IdentityHub::in_memory();
        let owner = LocalSigner::from_seed(owner_seed);
        let attacker = LocalSigner::from_seed(attacker_seed);
        let doc = DidDocument::build("iotx", &owner, &[], Timestamp::from_unix(T)).unwrap();
        hub.store(doc.clone()).unwrap();
        let service = ServiceEntry { id: doc.id.clone(), kind: ConnectivityType::WiFiMacAddress, service_endpoint: mac };
        let forged = DidDocument::sign(doc.id.clone(), &attacker, vec![service.clone()], Timestamp::from_unix(T + 1)).unwrap();
        prop_assert_eq!(hub.store(forged), Err(IdentityError::UpdateUnauthorized(doc.id.clone())));
        // A forged proof over the owner's key is refused before authorization.
        let mut spliced = DidDocument::sign(doc.id.clone(), &owner, vec![service], Timestamp::from_unix(T + 1)).unwrap();
        spliced.proof = attacker.sign(&spliced.signing_bytes()).unwrap();
        prop_assert_eq!(hub.store(spliced), Err(IdentityError::ProofInvalid));
        prop_assert_eq!(hub.fetch(&doc.id).unwrap(), doc);
    }

    #[test]
    fn verification_does_not_mutate(flag in any::<bool>(), period in 1u64..86_400) {
        let hub = Arc::new(IdentityHub::in_memory());
        let r = Resolver::local(Arc::clone(&hub));
        let issuer_key = LocalSigner::generate();
        let issuer = publish(&r, &issuer_key);
        let customer = publish(&r, &LocalSigner::generate());
        let device = publish(&r, &LocalSigner::generate());
        let body = CredentialBody {
            vc_id: VcId::generate(),
            issuer,
            issuance_date: Timestamp::from_unix(T),
            credential_subject: AccessRequestSubject {
                id: customer,
                device_ids: vec![device],
                start: Timestamp::from_unix(T),
                end: Timestamp::from_unix(T + 86_400),
                period: Period::from_secs(period),
                permissions: [Permission::Data].into(),
                privacy_preserving: flag,
            },
        };
        let vc = sign_credential(body, vec![], &issuer_key, &r).unwrap();
        let before = (vc.clone(), hub.len());
        prop_assert!(verify_credential(&vc, &r).is_ok());
        prop_assert_eq!((vc, hub.len()), before);
    }

    #[test]
    fn vc_ids_are_32_lowercase_hex(_i in 0..8u8) {
        let id = VcId::generate();
        prop_assert_eq!(id.as_str().len(), 32);
        prop_assert!(id.as_str().bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)));
    }

    #[test]
    fn mappings_resolve_from_every_key(serials in btree_set("[A-Z]{2}-[0-9]{1,6}", 1..12)) {
        let ks = Keystore::in_memory();
        let mut committed = Vec::new();
        for (i, serial) in serials.iter().enumerate() {
            let key = ks.generate_key().unwrap();
            let m = IdentityMapping {
                device_unique_id: serial.clone(),
                did: Did::new("iotx", &format!("d{i}")).unwrap(),
                connectivity_id: format!("{i:016X}"),
                cloud_key_slot: None,
                key_handle: key.key_handle,
            };
            ks.map_identity(m.clone()).unwrap();
            committed.push(m);
        }
        for m in &committed {
            prop_assert_eq!(&ks.lookup_by(LookupKey::Did(&m.did)).unwrap(), m);
            prop_assert_eq!(&ks.lookup_by(LookupKey::DeviceUniqueId(&m.device_unique_id)).unwrap(), m);
            prop_assert_eq!(&ks.lookup_by(LookupKey::ConnectivityId(&m.connectivity_id)).unwrap(), m);
        }
    }

    #[test]
    fn privacy_flag_iff_not_exempt(exempt in any::<bool>(), others in 0usize..4) {
        let w = world();
        let d = w.register(1);
        let mut policy = OwnerPolicy::default();
        for _ in 0..others {
            policy.privacy_exempt_list.insert(publish(w.ex.resolver(), &LocalSigner::generate()));
        }
        if exempt {
            policy.privacy_exempt_list.insert(w.customer.clone());
        }
        let vc = w.issue(policy, std::slice::from_ref(&d.did), 60, T + 86_400);
        prop_assert_eq!(!vc.credential_subject.privacy_preserving, exempt);
        // The id came from the exchange.
        prop_assert!(w.ex.ledger_entry(&vc.vc_id).is_some());
    }

    #[test]
    fn filter_chain_follows_spec_order(
        entries in vec((btree_set(0usize..4, 0..4), vec(prop_oneof![Just("redact_location"), Just("redact_device_id")], 0..3)), 0..5),
        device in 0usize..4,
    ) {
        let dids: Vec<Did> = (0..4).map(|i| Did::new("iotx", &format!("d{i}")).unwrap()).collect();
        let policy = OwnerPolicy {
            filter_spec: entries
                .iter()
                .map(|(ds, chain)| FilterSpecEntry {
                    device_ids: ds.iter().map(|&i| dids[i].clone()).collect(),
                    filter_chain: chain.iter().map(|s| s.to_string()).collect(),
                })
                .collect(),
            ..OwnerPolicy::default()
        };
        let expected: Vec<String> = entries
            .iter()
            .filter(|(ds, _)| ds.contains(&device))
            .flat_map(|(_, c)| c.iter().map(|s| s.to_string()))
            .collect();
        prop_assert_eq!(filter_chain_for(&dids[device], &policy), expected.clone());
        prop_assert_eq!(filter_chain_for(&dids[device], &policy), expected);
    }

    #[test]
    fn filters_are_idempotent_and_never_expand(fields in record_fields(), chain in vec(prop_oneof![Just("redact_location"), Just("redact_device_id")], 0..4)) {
        let reg = FilterRegistry::builtin();
        let rec = TelemetryRecord { device_did: Did::new("iotx", "x").unwrap(), timestamp: Timestamp::from_unix(T), fields };
        let once = reg.apply_chain(&chain, &rec).unwrap();
        prop_assert_eq!(&reg.apply_chain(&chain, &once).unwrap(), &once);
        prop_assert!(once.fields.keys().all(|k| rec.fields.contains_key(k)));
        prop_assert_eq!(once.timestamp, rec.timestamp);
        prop_assert_eq!(&once.device_did, &rec.device_did);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Every response under a privacy grant has the device's redaction
    /// targets replaced, and the pipeline keeps record count and timestamps.
    #[test]
    fn no_filter_bypass(batches in vec(vec(record_fields(), 0..5), 1..4), chain_pick in 0usize..3) {
        let w = world();
        let d = w.register(1);
        let chains = [vec!["redact_location"], vec!["redact_device_id"], vec!["redact_location", "redact_device_id"]];
        let chain: Vec<String> = chains[chain_pick].iter().map(|s| s.to_string()).collect();
        let policy = OwnerPolicy {
            filter_spec: vec![FilterSpecEntry { device_ids: [d.did.clone()].into(), filter_chain: chain.clone() }],
            ..OwnerPolicy::default()
        };
        w.push_policy(&policy, T);
        let vc = w.issue(policy, std::slice::from_ref(&d.did), 100, T + 86_400);
        prop_assert!(vc.credential_subject.privacy_preserving);
        w.ex.present_credential(&vc).unwrap();

        let registry = FilterRegistry::builtin();
        let targeted = |k: &str| chain.iter().any(|n| registry.get(n).unwrap().targets(k));
        let mut now = T;
        for batch in batches {
            let mut sent = Vec::new();
            for f in batch {
                now += 10;
                w.ingest(&d, now, f.clone());
                sent.push((now, f));
            }
            now += 100;
            let got = w.ex.access_data(&w.customer, &vc.vc_id, &d.did, Timestamp::from_unix(now)).unwrap();
            prop_assert_eq!(got.len(), sent.len());
            for (r, (at, raw)) in got.iter().zip(&sent) {
                prop_assert_eq!(r.timestamp.unix(), *at);
                for (k, v) in &r.fields {
                    if targeted(k) {
                        prop_assert_eq!(v, &FieldValue::from(REDACTED));
                    } else {
                        prop_assert_eq!(Some(v), raw.get(k));
                    }
                }
            }
        }
    }

    #[test]
    fn successful_accesses_are_a_period_apart(period in 1u64..50, gaps in vec(0i64..80, 1..25)) {
        let w = world();
        let d = w.register(1);
        let vc = w.issue(OwnerPolicy::default(), std::slice::from_ref(&d.did), period, T + 10_000);
        w.ex.present_credential(&vc).unwrap();
        let mut at = T;
        let mut ok: Vec<i64> = Vec::new();
        for g in gaps {
            at += g;
            match w.ex.access_data(&w.customer, &vc.vc_id, &d.did, Timestamp::from_unix(at)) {
                Ok(_) => ok.push(at),
                Err(AccessError::PeriodNotElapsed { next }) => {
                    let last = *ok.last().unwrap();
                    prop_assert_eq!(next.unix(), last + period as i64);
                    prop_assert!(at < next.unix());
                }
                Err(e) => return Err(TestCaseError::fail(format!("unexpected {e}"))),
            }
        }
        prop_assert!(ok.windows(2).all(|p| p[1] - p[0] >= period as i64));
    }

    #[test]
    fn devices_never_exceed_capacity(cap in 1u32..5, attempts in 1usize..12) {
        let w = world();
        let d = w.register(1);
        let mut policy = OwnerPolicy::default();
        policy.device_capacity.insert(d.did.clone(), cap);
        w.push_policy(&policy, T);
        let vcs: Vec<VerifiableCredential> = (0..attempts)
            .map(|_| {
                let body = CredentialBody {
                    vc_id: w.ex.issue_vc_id(&w.owner).unwrap(),
                    issuer: w.owner.clone(),
                    issuance_date: Timestamp::from_unix(T),
                    credential_subject: AccessRequestSubject {
                        id: w.customer.clone(),
                        device_ids: vec![d.did.clone()],
                        start: Timestamp::from_unix(T),
                        end: Timestamp::from_unix(T + 3600),
                        period: Period::from_secs(60),
                        permissions: [Permission::Data].into(),
                        privacy_preserving: false,
                    },
                };
                sign_credential(body, vec![], w.owner_key.as_ref(), w.ex.resolver()).unwrap()
            })
            .collect();
        let gate = Barrier::new(vcs.len());
        let results: Vec<Result<GrantNotice, PresentError>> = std::thread::scope(|s| {
            let hs: Vec<_> = vcs
                .iter()
                .map(|vc| {
                    let (gate, ex, did) = (&gate, &w.ex, &d.did);
                    s.spawn(move || {
                        gate.wait();
                        let r = ex.present_credential(vc);
                        assert!(ex.active_grants(did) <= cap);
                        r
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let accepted = results.iter().filter(|r| r.is_ok()).count();
        prop_assert_eq!(accepted, attempts.min(cap as usize));
        prop_assert!(results.iter().filter_map(|r| r.as_ref().err()).all(|e| matches!(e, PresentError::CapacityExceeded(_))));
        prop_assert_eq!(w.ex.active_grants(&d.did), accepted as u32);
    }

    #[test]
    fn fleet_output_is_a_function_of_seed_and_time(seed in any::<u64>(), times in btree_set(0i64..100_000, 1..10)) {
        let ks = Arc::new(Keystore::in_memory());
        let key = ks.generate_key().unwrap();
        let spec = DeviceSpec {
            profile: Profile::LoRaTempLocation,
            connectivity_id: "A81758FFFE03AB42".into(),
            emit_interval: 30,
            rng_seed: seed,
            lat: "1.3521".into(),
            lon: "103.8198".into(),
        };
        let did = Did::new("iotx", "sim").unwrap();
        let anchor = Timestamp::from_unix(T);
        let a = SimDevice::new(spec.clone(), did.clone(), key.key_handle.clone(), anchor);
        let b = SimDevice::new(spec, did, key.key_handle.clone(), anchor);
        let forward: Vec<SignedRecord> = times.iter().map(|&t| a.emit(&ks, anchor.plus(t)).unwrap()).collect();
        let backward: Vec<SignedRecord> = times.iter().rev().map(|&t| b.emit(&ks, anchor.plus(t)).unwrap()).collect();
        let backward: Vec<SignedRecord> = backward.into_iter().rev().collect();
        prop_assert_eq!(&forward, &backward);
        prop_assert!(forward.iter().all(|r| r.verify(&key.public_key)));
    }
}

#[test]
fn concurrent_presentation_of_one_credential() {
    for _ in 0..5 {
        let w = world();
        let devices: Vec<Did> = (0..3).map(|i| w.register(i).did).collect();
        let vc = w.issue(OwnerPolicy::default(), &devices, 60, T + 3600);
        let gate = Barrier::new(32);
        let ok: usize = std::thread::scope(|s| {
            let hs: Vec<_> = (0..32)
                .map(|_| {
                    s.spawn(|| {
                        gate.wait();
                        w.ex.present_credential(&vc).is_ok() as usize
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(ok, 1);
        let counts: BTreeSet<u32> = devices.iter().map(|d| w.ex.active_grants(d)).collect();
        assert_eq!(counts, BTreeSet::from([1]));
    }
}
