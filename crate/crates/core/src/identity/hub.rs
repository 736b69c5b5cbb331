use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use parking_lot::{Mutex, RwLock};

use super::document::derive_method_specific_id;
use super::{Did, DidDocument, IdentityError};

/// Revision number of a stored document, starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Revision(pub u64);

/// Repository of DID documents with full revision history.
///
/// A new revision is accepted only if its proof verifies under the key of
/// the latest stored revision. With a file attached, every accepted
/// revision is appended as one canonical JSON line.
pub struct IdentityHub {
    docs: RwLock<HashMap<Did, Vec<DidDocument>>>,
    // Held across check-and-append so writes to one DID serialize.
    log: Mutex<Option<File>>,
    self_certifying: bool,
}

impl IdentityHub {
    pub fn in_memory() -> Self {
        Self { docs: RwLock::new(HashMap::new()), log: Mutex::new(None), self_certifying: true }
    }

    /// Opens (or creates) a hub backed by an append-only file, replaying
    /// existing revisions through the same authorization checks.
    pub fn open(path: &Path) -> Result<Self, IdentityError> {
        let persist = |e: std::io::Error| IdentityError::Persistence(format!("{}: {e}", path.display()));
        let hub = Self::in_memory();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(persist)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(persist)?;
                if line.trim().is_empty() {
                    continue;
                }
                let doc: DidDocument = serde_json::from_str(&line).map_err(|e| {
                    IdentityError::Persistence(format!("{} line {}: {e}", path.display(), n + 1))
                })?;
                hub.store(doc)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(persist)?;
        *hub.log.lock() = Some(file);
        Ok(hub)
    }

    /// Hubs that accept foreign DIDs (not derived from their key) are
    /// needed to model external hubs for other methods.
    pub fn allow_foreign_ids(mut self) -> Self {
        self.self_certifying = false;
        self
    }

    pub fn store(&self, doc: DidDocument) -> Result<Revision, IdentityError> {
        doc.validate()?;
        let mut log = self.log.lock();
        let revision = {
            let docs = self.docs.read();
            match docs.get(&doc.id).and_then(|revs| revs.last()) {
                Some(current) => {
                    if !doc.verify_proof_with(&current.public_key) {
                        return Err(IdentityError::UpdateUnauthorized(doc.id.clone()));
                    }
                    docs[&doc.id].len() as u64 + 1
                }
                None => {
                    if self.self_certifying
                        && doc.id.method_specific_id() != derive_method_specific_id(&doc.public_key, doc.created)
                    {
                        return Err(IdentityError::NotSelfCertifying(doc.id.clone()));
                    }
                    1
                }
            }
        };
        if let Some(file) = log.as_mut() {
            let mut line = doc.to_canonical_string();
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| IdentityError::Persistence(e.to_string()))?;
        }
        self.docs.write().entry(doc.id.clone()).or_default().push(doc);
        Ok(Revision(revision))
    }

    pub fn fetch(&self, did: &Did) -> Result<DidDocument, IdentityError> {
        self.docs
            .read()
            .get(did)
            .and_then(|revs| revs.last().cloned())
            .ok_or_else(|| IdentityError::NotFound(did.clone()))
    }

    pub fn history(&self, did: &Did) -> Vec<DidDocument> {
        self.docs.read().get(did).cloned().unwrap_or_default()
    }

    pub fn len(&self) -> usize {
        self.docs.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Debug for IdentityHub {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IdentityHub").field("documents", &self.len()).finish()
    }
}
