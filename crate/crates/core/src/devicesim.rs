//! Simulated device fleet. Each device signs its readings with the key the
//! exchange generated for it at registration and keeps the commands it is
//! sent in a queue.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::Signature;
use crate::exchange::{CommandSink, Exchange, GrantNotice, Reason};
use crate::identity::{ConnectivityType, Did};
use crate::keystore::{KeyHandle, Keystore, KeystoreError, LookupKey};
use crate::telemetry::{FieldValue, Fields, SignedRecord, TelemetryRecord};
use crate::time::{Clock, ManualClock, Timestamp};

/// Starting temperature in hundredths of a degree.
const BASE_TEMP: i64 = 2500;
const MAX_STEP: i64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    LoRaTempLocation,
    EthernetGeneric,
}

impl Profile {
    pub fn connectivity_type(self) -> ConnectivityType {
        match self {
            Self::LoRaTempLocation => ConnectivityType::LoRaDeviceEUI,
            Self::EthernetGeneric => ConnectivityType::EthernetMacAddress,
        }
    }
}

/// One entry of a fleet config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct DeviceSpec {
    pub profile: Profile,
    pub connectivity_id: String,
    /// Seconds between emissions.
    pub emit_interval: u64,
    pub rng_seed: u64,
    #[serde(default)]
    pub lat: String,
    #[serde(default)]
    pub lon: String,
}

pub fn parse_fleet(text: &str) -> Result<Vec<DeviceSpec>, SimError> {
    let specs: Vec<DeviceSpec> = serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

impl DeviceSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.emit_interval == 0 {
            return Err(SimError::Config(format!("{}: emitInterval must be positive", self.connectivity_id)));
        }
        self.profile
            .connectivity_type()
            .check(&self.connectivity_id)
            .map_err(|e| SimError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("unknown key handle {0}")]
    UnknownKeyHandle(KeyHandle),
    #[error("fleet config: {0}")]
    Config(String),
}

impl SimError {
    pub fn token(&self) -> &'static str {
        match self {
            Self::UnknownDevice(_) => "UnknownDevice",
            Self::UnknownKeyHandle(_) => "UnknownKeyHandle",
            Self::Config(_) => "FleetConfigInvalid",
        }
    }
}

/// Cached position of the temperature walk: value after `step` steps.
#[derive(Debug, Clone)]
struct Walk {
    step: u64,
    value: i64,
    rng: ChaCha8Rng,
}

impl Walk {
    fn new(seed: u64) -> Self {
        Self { step: 0, value: BASE_TEMP, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

#[derive(Debug)]
pub struct SimDevice {
    pub spec: DeviceSpec,
    pub did: Did,
    pub key_handle: KeyHandle,
    /// Time of step zero of the walk.
    pub anchor: Timestamp,
    walk: Mutex<Walk>,
    commands: Mutex<Vec<Fields>>,
    notices: Mutex<Vec<GrantNotice>>,
}

impl SimDevice {
    pub fn new(spec: DeviceSpec, did: Did, key_handle: KeyHandle, anchor: Timestamp) -> Self {
        let walk = Walk::new(spec.rng_seed);
        Self {
            spec,
            did,
            key_handle,
            anchor,
            walk: Mutex::new(walk),
            commands: Mutex::new(Vec::new()),
            notices: Mutex::new(Vec::new()),
        }
    }

    fn steps_at(&self, at: Timestamp) -> u64 {
        (at.since(self.anchor).max(0) as u64) / self.spec.emit_interval
    }

    /// Temperature in hundredths after the walk has taken the steps due at `at`.
    fn temp_at(&self, at: Timestamp) -> i64 {
        let target = self.steps_at(at);
        let mut walk = self.walk.lock();
        if walk.step > target {
            *walk = Walk::new(self.spec.rng_seed);
        }
        let step = Uniform::new_inclusive(-MAX_STEP, MAX_STEP);
        while walk.step < target {
            let d = step.sample(&mut walk.rng);
            walk.value += d;
            walk.step += 1;
        }
        walk.value
    }

    pub fn fields_at(&self, at: Timestamp) -> Fields {
        let mut f = Fields::new();
        match self.spec.profile {
            Profile::LoRaTempLocation => {
                f.insert("temp".into(), FieldValue::Text(format_hundredths(self.temp_at(at))));
                f.insert("lat".into(), FieldValue::Text(self.spec.lat.clone()));
                f.insert("lon".into(), FieldValue::Text(self.spec.lon.clone()));
                f.insert("loraId".into(), FieldValue::Text(self.spec.connectivity_id.clone()));
            }
            Profile::EthernetGeneric => {
                f.insert("temp".into(), FieldValue::Text(format_hundredths(self.temp_at(at))));
                f.insert("macAddress".into(), FieldValue::Text(self.spec.connectivity_id.clone()));
                f.insert("uptime".into(), FieldValue::Integer(at.since(self.anchor).max(0)));
            }
        }
        f
    }

    pub fn emit(&self, keystore: &Keystore, at: Timestamp) -> Result<SignedRecord, SimError> {
        let record = TelemetryRecord { device_did: self.did.clone(), timestamp: at, fields: self.fields_at(at) };
        let signature: Signature = keystore.sign_with(&self.key_handle, &record.signing_bytes()).map_err(|e| match e {
            KeystoreError::UnknownKeyHandle(h) => SimError::UnknownKeyHandle(h),
            other => SimError::UnknownDevice(other.to_string()),
        })?;
        Ok(SignedRecord { record, signature })
    }

    pub fn deliver(&self, command: Fields) {
        self.commands.lock().push(command);
    }

    pub fn commands(&self) -> Vec<Fields> {
        self.commands.lock().clone()
    }

    pub fn notices(&self) -> Vec<GrantNotice> {
        self.notices.lock().clone()
    }
}

/// `2512` → `"25.12"`, `-7` → `"-0.07"`.
pub fn format_hundredths(v: i64) -> String {
    let sign = if v < 0 { "-" } else { "" };
    let a = v.unsigned_abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

/// Where emitted records go.
pub trait TelemetrySink: Send + Sync {
    /// On rejection returns the reason token.
    fn submit(&self, connectivity_id: &str, record: &SignedRecord) -> Result<(), String>;
}

impl TelemetrySink for Exchange {
    fn submit(&self, connectivity_id: &str, record: &SignedRecord) -> Result<(), String> {
        self.ingest_telemetry(connectivity_id, record).map_err(|e| e.token().to_owned())
    }
}

#[derive(Clone, Copy)]
pub enum FleetClock<'a> {
    /// Time is advanced by the runner; counts are exact.
    Manual(&'a ManualClock),
    /// Wall clock; the runner sleeps between emissions.
    Real(&'a dyn Clock),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FleetReport {
    pub accepted: BTreeMap<Did, u64>,
    pub failures: Vec<(Did, String)>,
}

impl FleetReport {
    pub fn accepted_for(&self, device: &Did) -> u64 {
        self.accepted.get(device).copied().unwrap_or(0)
    }

    pub fn total_accepted(&self) -> u64 {
        self.accepted.values().sum()
    }
}

/// A set of simulated devices sharing one keystore.
#[derive(Debug)]
pub struct Fleet {
    keystore: Arc<Keystore>,
    devices: Vec<SimDevice>,
    index: BTreeMap<Did, usize>,
}

impl Fleet {
    pub fn new(keystore: Arc<Keystore>) -> Self {
        Self { keystore, devices: Vec::new(), index: BTreeMap::new() }
    }

    /// Builds the fleet from config, finding each device's DID and key
    /// through its connectivity id.
    pub fn from_keystore(keystore: Arc<Keystore>, specs: Vec<DeviceSpec>, anchor: Timestamp) -> Result<Self, SimError> {
        let mut fleet = Self::new(Arc::clone(&keystore));
        for spec in specs {
            spec.validate()?;
            let m = keystore
                .lookup_by(LookupKey::ConnectivityId(&spec.connectivity_id))
                .map_err(|_| SimError::UnknownDevice(spec.connectivity_id.clone()))?;
            fleet.add(SimDevice::new(spec, m.did, m.key_handle, anchor));
        }
        Ok(fleet)
    }

    pub fn add(&mut self, device: SimDevice) {
        self.index.insert(device.did.clone(), self.devices.len());
        self.devices.push(device);
    }

    pub fn devices(&self) -> &[SimDevice] {
        &self.devices
    }

    pub fn device(&self, did: &Did) -> Result<&SimDevice, SimError> {
        self.index
            .get(did)
            .map(|&i| &self.devices[i])
            .ok_or_else(|| SimError::UnknownDevice(did.to_string()))
    }

    pub fn emit(&self, did: &Did, at: Timestamp) -> Result<SignedRecord, SimError> {
        self.device(did)?.emit(&self.keystore, at)
    }

    pub fn deliver_command(&self, did: &Did, command: Fields) -> Result<(), SimError> {
        self.device(did)?.deliver(command);
        Ok(())
    }

    /// Emits every device's records for `duration` seconds from the clock's
    /// current time and submits them. A failing record is reported and the
    /// run continues.
    pub fn run(&self, duration: u64, clock: FleetClock<'_>, sink: &dyn TelemetrySink) -> FleetReport {
        let report = Mutex::new(FleetReport::default());
        let submit = |dev: &SimDevice, at: Timestamp| {
            let outcome = self
                .emit(&dev.did, at)
                .map_err(|e| e.token().to_owned())
                .and_then(|r| sink.submit(&dev.spec.connectivity_id, &r));
            let mut rep = report.lock();
            match outcome {
                Ok(()) => *rep.accepted.entry(dev.did.clone()).or_default() += 1,
                Err(token) => rep.failures.push((dev.did.clone(), token)),
            }
        };
        match clock {
            FleetClock::Manual(mc) => {
                let start = mc.now();
                let mut schedule: Vec<(i64, usize)> = self
                    .devices
                    .iter()
                    .enumerate()
                    .flat_map(|(i, d)| {
                        let n = duration / d.spec.emit_interval;
                        (1..=n).map(move |k| ((k * d.spec.emit_interval) as i64, i))
                    })
                    .collect();
                schedule.sort();
                for (offset, i) in schedule {
                    let at = start.plus(offset);
                    mc.set(at);
                    submit(&self.devices[i], at);
                }
                mc.set(start.plus(duration as i64));
            }
            FleetClock::Real(c) => {
                let deadline = std::time::Instant::now() + Duration::from_secs(duration);
                std::thread::scope(|s| {
                    for dev in &self.devices {
                        let submit = &submit;
                        s.spawn(move || {
                            let interval = Duration::from_secs(dev.spec.emit_interval);
                            let mut next = std::time::Instant::now() + interval;
                            while next <= deadline {
                                std::thread::sleep(next.saturating_duration_since(std::time::Instant::now()));
                                submit(dev, c.now());
                                next += interval;
                            }
                        });
                    }
                });
            }
        }
        report.into_inner()
    }
}

impl CommandSink for Fleet {
    fn deliver(&self, device: &Did, command: Fields) -> Result<(), String> {
        self.deliver_command(device, command).map_err(|e| e.to_string())
    }

    fn grant_notice(&self, device: &Did, notice: &GrantNotice) {
        if let Ok(d) = self.device(device) {
            d.notices.lock().push(notice.clone());
        }
    }
}
