//! Verifiable credentials authorizing access to a set of devices.
//!
//! A credential's `proof` is the issuer's signature over the canonical JSON
//! of every other field. Endorsements from authorizing parties sign the
//! credential body (everything except `proof` and `endorsements`), so each
//! party endorses the exact terms that get issued.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::{canonical_string, canonicalize};
use crate::crypto::{Signature, Signer};
use crate::identity::{Did, DidResolver};
use crate::time::{Period, Timestamp};

/// Exchange-minted credential identifier. Minted values are 32 lowercase
/// hex characters; on the wire it is an opaque string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VcId(String);

impl VcId {
    pub fn generate() -> Self {
        let mut bytes = [0u8; 16];
        rand::rngs::OsRng.fill_bytes(&mut bytes);
        Self(hex::encode(bytes))
    }

    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Permission {
    Data,
    Control,
}

pub type Permissions = BTreeSet<Permission>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AccessRequestSubject {
    /// The customer.
    pub id: Did,
    pub device_ids: Vec<Did>,
    pub start: Timestamp,
    pub end: Timestamp,
    pub period: Period,
    pub permissions: Permissions,
    pub privacy_preserving: bool,
}

/// Temporal and list rules shared by subjects and drafts.
pub(crate) fn check_terms(
    device_ids: &[Did],
    start: Timestamp,
    end: Timestamp,
    period: Period,
    permissions: &Permissions,
) -> Result<(), String> {
    if start >= end {
        return Err(format!("start {start} is not before end {end}"));
    }
    let span = end.since(start) as u64;
    if period.secs() == 0 || period.secs() > span {
        return Err(format!("period {}s outside (0, {span}]", period.secs()));
    }
    if device_ids.is_empty() {
        return Err("no devices".into());
    }
    let mut seen = BTreeSet::new();
    for d in device_ids {
        if !seen.insert(d) {
            return Err(format!("duplicate device {d}"));
        }
    }
    if permissions.is_empty() {
        return Err("no permissions".into());
    }
    Ok(())
}

impl AccessRequestSubject {
    pub fn validate(&self) -> Result<(), String> {
        check_terms(&self.device_ids, self.start, self.end, self.period, &self.permissions)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Endorsement {
    pub authorizing_party: Did,
    pub signature: Signature,
}

/// The terms of a credential: everything endorsements cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CredentialBody {
    pub vc_id: VcId,
    pub issuer: Did,
    pub issuance_date: Timestamp,
    pub credential_subject: AccessRequestSubject,
}

impl CredentialBody {
    /// Canonical bytes an endorsement signs.
    pub fn endorsement_payload(&self) -> Vec<u8> {
        canonicalize(&serde_json::to_value(self).expect("body serializes"))
            .expect("body is canonicalizable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct VerifiableCredential {
    pub vc_id: VcId,
    pub issuer: Did,
    pub issuance_date: Timestamp,
    pub credential_subject: AccessRequestSubject,
    pub endorsements: Vec<Endorsement>,
    pub proof: Signature,
}

fn proof_value(body: &CredentialBody, endorsements: &[Endorsement]) -> Value {
    let mut v = serde_json::to_value(body).expect("body serializes");
    v.as_object_mut()
        .expect("body is an object")
        .insert("endorsements".into(), serde_json::to_value(endorsements).expect("endorsements serialize"));
    v
}

impl VerifiableCredential {
    pub fn body(&self) -> CredentialBody {
        CredentialBody {
            vc_id: self.vc_id.clone(),
            issuer: self.issuer.clone(),
            issuance_date: self.issuance_date,
            credential_subject: self.credential_subject.clone(),
        }
    }

    /// Canonical bytes the issuer's proof covers.
    pub fn proof_payload(&self) -> Vec<u8> {
        canonicalize(&proof_value(&self.body(), &self.endorsements)).expect("credential is canonicalizable")
    }

    pub fn to_canonical_string(&self) -> String {
        canonical_string(self).expect("credential is canonicalizable")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("subject invalid: {0}")]
    SubjectInvalid(String),
    #[error("issuer {0} cannot be resolved")]
    IssuerUnresolvable(Did),
    #[error("signer key does not match issuer document")]
    SignerMismatch,
    #[error("signing failed: {0}")]
    Signing(String),
}

/// Why a credential failed verification. The first failing check wins.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyFailure {
    #[error("issuer {0} cannot be resolved")]
    IssuerUnresolvable(Did),
    #[error("issuer proof does not verify")]
    ProofInvalid,
    #[error("endorsement by {0} does not verify")]
    EndorsementInvalid(Did),
    #[error("subject invalid: {0}")]
    SubjectInvalid(String),
    #[error("device {0} cannot be resolved")]
    DeviceUnresolvable(Did),
}

impl VerifyFailure {
    pub fn token(&self) -> &'static str {
        match self {
            Self::IssuerUnresolvable(_) => "IssuerUnresolvable",
            Self::ProofInvalid => "ProofInvalid",
            Self::EndorsementInvalid(_) => "EndorsementInvalid",
            Self::SubjectInvalid(_) => "SubjectInvalid",
            Self::DeviceUnresolvable(_) => "DeviceUnresolvable",
        }
    }
}

/// Signs a credential body plus endorsements as its issuer.
pub fn sign_credential(
    body: CredentialBody,
    endorsements: Vec<Endorsement>,
    signer: &dyn Signer,
    resolver: &dyn DidResolver,
) -> Result<VerifiableCredential, CredentialError> {
    body.credential_subject.validate().map_err(CredentialError::SubjectInvalid)?;
    let issuer_doc = resolver
        .resolve(&body.issuer)
        .map_err(|_| CredentialError::IssuerUnresolvable(body.issuer.clone()))?;
    if issuer_doc.public_key != signer.public_key() {
        return Err(CredentialError::SignerMismatch);
    }
    let payload = canonicalize(&proof_value(&body, &endorsements)).expect("credential is canonicalizable");
    let proof = signer.sign(&payload).map_err(|e| CredentialError::Signing(e.to_string()))?;
    Ok(VerifiableCredential {
        vc_id: body.vc_id,
        issuer: body.issuer,
        issuance_date: body.issuance_date,
        credential_subject: body.credential_subject,
        endorsements,
        proof,
    })
}

/// Checks `proof` over raw payload bytes under the issuer's resolved key.
pub fn verify_signed_payload(
    issuer: &Did,
    payload: &[u8],
    proof: &Signature,
    resolver: &dyn DidResolver,
) -> Result<(), VerifyFailure> {
    let doc = resolver
        .resolve(issuer)
        .map_err(|_| VerifyFailure::IssuerUnresolvable(issuer.clone()))?;
    if doc.public_key.verify(payload, proof) {
        Ok(())
    } else {
        Err(VerifyFailure::ProofInvalid)
    }
}

/// Read-only verification: issuer resolves, proof verifies, every
/// endorsement verifies, subject terms hold, every device resolves.
pub fn verify_credential(vc: &VerifiableCredential, resolver: &dyn DidResolver) -> Result<(), VerifyFailure> {
    verify_signed_payload(&vc.issuer, &vc.proof_payload(), &vc.proof, resolver)?;
    let body_bytes = vc.body().endorsement_payload();
    for e in &vc.endorsements {
        let ok = resolver
            .resolve(&e.authorizing_party)
            .map(|doc| doc.public_key.verify(&body_bytes, &e.signature))
            .unwrap_or(false);
        if !ok {
            return Err(VerifyFailure::EndorsementInvalid(e.authorizing_party.clone()));
        }
    }
    vc.credential_subject.validate().map_err(VerifyFailure::SubjectInvalid)?;
    for d in &vc.credential_subject.device_ids {
        if resolver.resolve(d).is_err() {
            return Err(VerifyFailure::DeviceUnresolvable(d.clone()));
        }
    }
    Ok(())
}
