//! Device key custody and the identity mapping table.
//!
//! Private keys are generated inside the store and never leave it; the only
//! way to use one is [`Keystore::sign_with`]. The mapping table ties a
//! device's manufacturer serial, DID, connectivity identifier, optional
//! cloud key slot and key handle together, each of the first three unique.
//!
//! Persistence is an append-only file: an 8-byte magic, a 16-byte salt, then
//! records of `u32` big-endian length followed by a 12-byte nonce and a
//! ChaCha20-Poly1305 ciphertext. The key is PBKDF2-HMAC-SHA256 over the
//! passphrase; the record index is bound in as associated data.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::SigningKey;
use parking_lot::{Mutex, RwLock};
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{PublicKey, SignError, Signature, Signer};
use crate::identity::Did;
use crate::time::{Clock, SystemClock, Timestamp};

pub const PASSPHRASE_ENV: &str = "IOTX_KEYSTORE_PASSPHRASE";

const MAGIC: &[u8; 8] = b"IOTXKS01";
const KDF_ROUNDS: u32 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeystoreError {
    #[error("unknown key handle {0}")]
    UnknownKeyHandle(KeyHandle),
    #[error("mapping refers to missing key handle {0}")]
    DanglingKeyHandle(KeyHandle),
    #[error("{field} {value:?} already mapped")]
    DuplicateIdentity { field: &'static str, value: String },
    #[error("no mapping for {0}")]
    NotFound(String),
    #[error("{PASSPHRASE_ENV} is not set")]
    MissingPassphrase,
    #[error("keystore file cannot be decrypted (wrong passphrase or tampered)")]
    Decrypt,
    #[error("keystore file corrupt: {0}")]
    Corrupt(String),
    #[error("keystore io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyHandle(String);

impl KeyHandle {
    fn generate() -> Self {
        let mut b = [0u8; 8];
        OsRng.fill_bytes(&mut b);
        Self(format!("kh-{}", hex::encode(b)))
    }

    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for KeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Public view of a stored keypair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KeyRecord {
    pub key_handle: KeyHandle,
    pub public_key: PublicKey,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IdentityMapping {
    pub device_unique_id: String,
    pub did: Did,
    pub connectivity_id: String,
    /// Opaque cloud-provider key reference; stored, never interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_key_slot: Option<String>,
    pub key_handle: KeyHandle,
}

#[derive(Debug, Clone, Copy)]
pub enum LookupKey<'a> {
    Did(&'a Did),
    DeviceUniqueId(&'a str),
    ConnectivityId(&'a str),
}

struct KeyEntry {
    record: KeyRecord,
    signing: SigningKey,
}

#[derive(Default)]
struct MappingTable {
    by_serial: HashMap<String, IdentityMapping>,
    serial_by_did: HashMap<Did, String>,
    serial_by_conn: HashMap<String, String>,
}

impl MappingTable {
    fn check(&self, m: &IdentityMapping) -> Result<(), KeystoreError> {
        let dup = |field, value: &str| KeystoreError::DuplicateIdentity { field, value: value.to_owned() };
        if self.by_serial.contains_key(&m.device_unique_id) {
            return Err(dup("deviceUniqueId", &m.device_unique_id));
        }
        if self.serial_by_did.contains_key(&m.did) {
            return Err(dup("did", m.did.as_str()));
        }
        if self.serial_by_conn.contains_key(&m.connectivity_id) {
            return Err(dup("connectivityId", &m.connectivity_id));
        }
        Ok(())
    }

    fn insert(&mut self, m: IdentityMapping) {
        self.serial_by_did.insert(m.did.clone(), m.device_unique_id.clone());
        self.serial_by_conn.insert(m.connectivity_id.clone(), m.device_unique_id.clone());
        self.by_serial.insert(m.device_unique_id.clone(), m);
    }

    fn remove(&mut self, serial: &str) {
        if let Some(m) = self.by_serial.remove(serial) {
            self.serial_by_did.remove(&m.did);
            self.serial_by_conn.remove(&m.connectivity_id);
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "camelCase")]
enum LogEntry {
    #[serde(rename_all = "camelCase")]
    Key { key_handle: KeyHandle, seed: String, created_at: Timestamp },
    #[serde(rename_all = "camelCase")]
    DiscardKey { key_handle: KeyHandle },
    Map(IdentityMapping),
    #[serde(rename_all = "camelCase")]
    Unmap { device_unique_id: String },
}

struct SealedLog {
    file: File,
    cipher: ChaCha20Poly1305,
    next_index: u64,
}

impl SealedLog {
    fn append(&mut self, entry: &LogEntry) -> Result<(), KeystoreError> {
        let plain = serde_json::to_vec(entry).expect("log entry serializes");
        let mut nonce = [0u8; 12];
        OsRng.fill_bytes(&mut nonce);
        let aad = self.next_index.to_be_bytes();
        let sealed = self
            .cipher
            .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plain, aad: &aad })
            .map_err(|_| KeystoreError::Io("encryption failed".into()))?;
        let len = (nonce.len() + sealed.len()) as u32;
        let mut buf = Vec::with_capacity(4 + len as usize);
        buf.extend_from_slice(&len.to_be_bytes());
        buf.extend_from_slice(&nonce);
        buf.extend_from_slice(&sealed);
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| KeystoreError::Io(e.to_string()))?;
        self.next_index += 1;
        Ok(())
    }
}

fn derive_cipher(passphrase: &str, salt: &[u8]) -> ChaCha20Poly1305 {
    let mut key = [0u8; 32];
    pbkdf2::pbkdf2_hmac::<sha2::Sha256>(passphrase.as_bytes(), salt, KDF_ROUNDS, &mut key);
    ChaCha20Poly1305::new(Key::from_slice(&key))
}

pub struct Keystore {
    keys: RwLock<HashMap<KeyHandle, Arc<KeyEntry>>>,
    mappings: RwLock<MappingTable>,
    // Serializes every mutation, and with it every log append.
    log: Mutex<Option<SealedLog>>,
    clock: Arc<dyn Clock>,
}

impl Keystore {
    pub fn in_memory() -> Self {
        Self {
            keys: RwLock::new(HashMap::new()),
            mappings: RwLock::new(MappingTable::default()),
            log: Mutex::new(None),
            clock: Arc::new(SystemClock),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Opens the store using the passphrase from `IOTX_KEYSTORE_PASSPHRASE`.
    pub fn open_from_env(path: &Path) -> Result<Self, KeystoreError> {
        let pass = std::env::var(PASSPHRASE_ENV).map_err(|_| KeystoreError::MissingPassphrase)?;
        if pass.is_empty() {
            return Err(KeystoreError::MissingPassphrase);
        }
        Self::open(path, &pass)
    }

    /// Opens or creates an encrypted store file and replays it.
    pub fn open(path: &Path, passphrase: &str) -> Result<Self, KeystoreError> {
        let io = |e: std::io::Error| KeystoreError::Io(format!("{}: {e}", path.display()));
        let mut opts = OpenOptions::new();
        opts.read(true).append(true).create(true);
        #[cfg(unix)]
        {
            use std::os::unix::fs::OpenOptionsExt;
            opts.mode(0o600);
        }
        let mut file = opts.open(path).map_err(io)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(io)?;

        let store = Self::in_memory();
        let (cipher, next_index) = if bytes.is_empty() {
            let mut salt = [0u8; 16];
            OsRng.fill_bytes(&mut salt);
            let mut header = MAGIC.to_vec();
            header.extend_from_slice(&salt);
            file.write_all(&header).and_then(|_| file.sync_data()).map_err(io)?;
            (derive_cipher(passphrase, &salt), 0)
        } else {
            if bytes.len() < 24 || &bytes[..8] != MAGIC {
                return Err(KeystoreError::Corrupt("bad header".into()));
            }
            let cipher = derive_cipher(passphrase, &bytes[8..24]);
            let mut pos = 24;
            let mut index = 0u64;
            while pos < bytes.len() {
                if pos + 4 > bytes.len() {
                    return Err(KeystoreError::Corrupt(format!("truncated length at byte {pos}")));
                }
                let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
                pos += 4;
                if len < 12 || pos + len > bytes.len() {
                    return Err(KeystoreError::Corrupt(format!("truncated record at byte {pos}")));
                }
                let (nonce, sealed) = bytes[pos..pos + len].split_at(12);
                let aad = index.to_be_bytes();
                let plain = cipher
                    .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: &aad })
                    .map_err(|_| KeystoreError::Decrypt)?;
                let entry: LogEntry =
                    serde_json::from_slice(&plain).map_err(|e| KeystoreError::Corrupt(e.to_string()))?;
                store.replay(entry)?;
                pos += len;
                index += 1;
            }
            (cipher, index)
        };
        *store.log.lock() = Some(SealedLog { file, cipher, next_index });
        Ok(store)
    }

    fn replay(&self, entry: LogEntry) -> Result<(), KeystoreError> {
        match entry {
            LogEntry::Key { key_handle, seed, created_at } => {
                let seed: [u8; 32] = hex::decode(&seed)
                    .ok()
                    .and_then(|b| b.try_into().ok())
                    .ok_or_else(|| KeystoreError::Corrupt("bad seed".into()))?;
                let signing = SigningKey::from_bytes(&seed);
                let record = KeyRecord {
                    key_handle: key_handle.clone(),
                    public_key: PublicKey::from_bytes(signing.verifying_key().to_bytes()),
                    created_at,
                };
                self.keys.write().insert(key_handle, Arc::new(KeyEntry { record, signing }));
            }
            LogEntry::DiscardKey { key_handle } => {
                self.keys.write().remove(&key_handle);
            }
            LogEntry::Map(m) => {
                let mut table = self.mappings.write();
                table.check(&m)?;
                table.insert(m);
            }
            LogEntry::Unmap { device_unique_id } => self.mappings.write().remove(&device_unique_id),
        }
        Ok(())
    }

    fn append(log: &mut Option<SealedLog>, entry: &LogEntry) -> Result<(), KeystoreError> {
        match log.as_mut() {
            Some(l) => l.append(entry),
            None => Ok(()),
        }
    }

    /// Generates a fresh keypair and returns its public record.
    pub fn generate_key(&self) -> Result<KeyRecord, KeystoreError> {
        let signing = SigningKey::generate(&mut OsRng);
        let record = KeyRecord {
            key_handle: KeyHandle::generate(),
            public_key: PublicKey::from_bytes(signing.verifying_key().to_bytes()),
            created_at: self.clock.now(),
        };
        let mut log = self.log.lock();
        Self::append(
            &mut log,
            &LogEntry::Key {
                key_handle: record.key_handle.clone(),
                seed: hex::encode(signing.to_bytes()),
                created_at: record.created_at,
            },
        )?;
        self.keys
            .write()
            .insert(record.key_handle.clone(), Arc::new(KeyEntry { record: record.clone(), signing }));
        Ok(record)
    }

    pub fn key_record(&self, handle: &KeyHandle) -> Result<KeyRecord, KeystoreError> {
        self.keys
            .read()
            .get(handle)
            .map(|e| e.record.clone())
            .ok_or_else(|| KeystoreError::UnknownKeyHandle(handle.clone()))
    }

    /// Signs with a stored key. Deterministic for a given key and message.
    pub fn sign_with(&self, handle: &KeyHandle, message: &[u8]) -> Result<Signature, KeystoreError> {
        let entry = self
            .keys
            .read()
            .get(handle)
            .cloned()
            .ok_or_else(|| KeystoreError::UnknownKeyHandle(handle.clone()))?;
        use ed25519_dalek::Signer as _;
        Ok(Signature::from_bytes(entry.signing.sign(message).to_bytes()))
    }

    /// A [`Signer`] bound to one stored key.
    pub fn signer(self: &Arc<Self>, handle: &KeyHandle) -> Result<KeystoreSigner, KeystoreError> {
        let record = self.key_record(handle)?;
        Ok(KeystoreSigner { store: Arc::clone(self), record })
    }

    pub(crate) fn discard_key(&self, handle: &KeyHandle) -> Result<(), KeystoreError> {
        let mut log = self.log.lock();
        Self::append(&mut log, &LogEntry::DiscardKey { key_handle: handle.clone() })?;
        self.keys.write().remove(handle);
        Ok(())
    }

    pub fn map_identity(&self, mapping: IdentityMapping) -> Result<(), KeystoreError> {
        let mut log = self.log.lock();
        if !self.keys.read().contains_key(&mapping.key_handle) {
            return Err(KeystoreError::DanglingKeyHandle(mapping.key_handle));
        }
        self.mappings.read().check(&mapping)?;
        Self::append(&mut log, &LogEntry::Map(mapping.clone()))?;
        self.mappings.write().insert(mapping);
        Ok(())
    }

    pub(crate) fn unmap(&self, device_unique_id: &str) -> Result<(), KeystoreError> {
        let mut log = self.log.lock();
        Self::append(&mut log, &LogEntry::Unmap { device_unique_id: device_unique_id.to_owned() })?;
        self.mappings.write().remove(device_unique_id);
        Ok(())
    }

    pub fn lookup_by(&self, key: LookupKey<'_>) -> Result<IdentityMapping, KeystoreError> {
        let table = self.mappings.read();
        let serial = match key {
            LookupKey::DeviceUniqueId(s) => Some(s),
            LookupKey::Did(d) => table.serial_by_did.get(d).map(String::as_str),
            LookupKey::ConnectivityId(c) => table.serial_by_conn.get(c).map(String::as_str),
        };
        serial
            .and_then(|s| table.by_serial.get(s))
            .cloned()
            .ok_or_else(|| {
                KeystoreError::NotFound(match key {
                    LookupKey::Did(d) => d.to_string(),
                    LookupKey::DeviceUniqueId(s) | LookupKey::ConnectivityId(s) => s.to_owned(),
                })
            })
    }

    pub fn mapping_count(&self) -> usize {
        self.mappings.read().by_serial.len()
    }
}

impl fmt::Debug for Keystore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keystore")
            .field("keys", &self.keys.read().len())
            .field("mappings", &self.mapping_count())
            .finish()
    }
}

/// Signs through the keystore without exposing key material.
#[derive(Clone)]
pub struct KeystoreSigner {
    store: Arc<Keystore>,
    record: KeyRecord,
}

impl KeystoreSigner {
    pub fn handle(&self) -> &KeyHandle {
        &self.record.key_handle
    }
}

impl Signer for KeystoreSigner {
    fn public_key(&self) -> PublicKey {
        self.record.public_key
    }

    fn sign(&self, message: &[u8]) -> Result<Signature, SignError> {
        self.store
            .sign_with(&self.record.key_handle, message)
            .map_err(|_| SignError::UnknownKeyHandle(self.record.key_handle.to_string()))
    }
}
