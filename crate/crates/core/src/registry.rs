//! Regulator-side authorization registry.
//!
//! Holds purpose codes, signed program manifests, signed authorizations and
//! per-(subject, purpose) consent records. Every mutation is appended to a
//! signed journal; replaying the journal rebuilds the registry exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{CanonicalBytes, DecodeError, FieldList, Reader};
use crate::crypto::{sha256, Hash32, Signature, Signer, SigningIdentity};
use crate::ids::{Scope, Timestamp, VirtualId};

pub const TAG_AUTH: &str = "AUTHv1";
pub const TAG_MANIFEST: &str = "MANIv1";
pub const TAG_DELETION_LIST: &str = "DELv1";
const TAG_DELETION_SIG: &str = "DELPROOFv1";
const TAG_DELETION_SET: &str = "DELSETv1";
const TAG_JOURNAL: &str = "JRNv1";
const TAG_EVENT: &str = "REGv1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("purpose {0:?} already registered")]
    DuplicatePurpose(String),
    #[error("purpose {0:?} is not registered")]
    UnknownPurpose(String),
    #[error("invalid purpose code {0:?}")]
    InvalidPurpose(String),
    #[error("program {0:?} already has a manifest")]
    DuplicateProgram(String),
    #[error("validity window must satisfy from < until")]
    InvalidWindow,
    #[error("not found")]
    NotFound,
    #[error("authorization {0:?} is not active")]
    NotActive(String),
    #[error("status transition {from:?} -> {to:?} not allowed")]
    InvalidTransition { from: AuthStatus, to: AuthStatus },
    #[error("no live consent to withdraw")]
    NoConsentToWithdraw,
    #[error("deletion proof does not verify")]
    BadDeletionProof,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("journal entry {0} has a bad signature")]
    Signature(u64),
    #[error("journal entry {0} is out of sequence")]
    Sequence(u64),
    #[error("journal entry {0} does not decode: {1}")]
    Decode(u64, DecodeError),
    #[error("journal entry {0} does not apply: {1}")]
    Apply(u64, RegistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Basis {
    Legal,
    Consent,
}

impl Basis {
    pub fn as_str(self) -> &'static str {
        match self {
            Basis::Legal => "legal",
            Basis::Consent => "consent",
        }
    }
}

impl core::str::FromStr for Basis {
    type Err = crate::ids::ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "legal" => Ok(Basis::Legal),
            "consent" => Ok(Basis::Consent),
            _ => Err(crate::ids::ParseError::Basis(s.into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AuthStatus {
    Active,
    PendingConsent,
    Revoked,
}

impl AuthStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AuthStatus::Active => "active",
            AuthStatus::PendingConsent => "pending_consent",
            AuthStatus::Revoked => "revoked",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [AuthStatus::Active, AuthStatus::PendingConsent, AuthStatus::Revoked]
            .into_iter()
            .find(|st| st.as_str() == s)
    }

    pub fn can_become(self, next: AuthStatus) -> bool {
        matches!(
            (self, next),
            (AuthStatus::Active, AuthStatus::Revoked)
                | (AuthStatus::PendingConsent, AuthStatus::Active)
                | (AuthStatus::PendingConsent, AuthStatus::Revoked)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Authorization {
    pub auth_id: String,
    pub grantee_key_id: String,
    pub scope: Scope,
    pub purpose_code: String,
    pub basis: Basis,
    pub valid_from: Timestamp,
    pub valid_until: Timestamp,
    pub status: AuthStatus,
    pub signature: Signature,
}

impl Authorization {
    fn push_body<'a>(&'a self, list: &mut FieldList<'a>) {
        list.str(&self.auth_id).str(&self.grantee_key_id);
        self.scope.push_fields(list);
        list.str(&self.purpose_code)
            .str(self.basis.as_str())
            .uint(self.valid_from)
            .uint(self.valid_until)
            .str(self.status.as_str());
    }

    pub fn signing_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.encode(TAG_AUTH)
    }

    pub fn verify(&self, regulator: &SigningIdentity) -> bool {
        regulator.verify(&self.signing_bytes(), &self.signature.0).unwrap_or(false)
    }

    pub fn in_window(&self, now: Timestamp) -> bool {
        self.valid_from <= now && now < self.valid_until
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let auth_id = r.string()?;
        let grantee_key_id = r.string()?;
        let scope = Scope::read_fields(r)?;
        let purpose_code = r.string()?;
        let basis = r.str()?.parse().map_err(|_| DecodeError::Range(0))?;
        let valid_from = r.uint()?;
        let valid_until = r.uint()?;
        let status = AuthStatus::parse(r.str()?).ok_or(DecodeError::Range(0))?;
        let signature = Signature(r.array()?);
        Ok(Authorization { auth_id, grantee_key_id, scope, purpose_code, basis, valid_from, valid_until, status, signature })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramManifest {
    pub program_id: String,
    pub content_digest: Hash32,
    pub declared_purpose: String,
    pub allowed_scope: Scope,
    pub signature: Signature,
}

impl ProgramManifest {
    fn push_body<'a>(&'a self, list: &mut FieldList<'a>) {
        list.str(&self.program_id).bytes(&self.content_digest).str(&self.declared_purpose);
        self.allowed_scope.push_fields(list);
    }

    pub fn signing_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.encode(TAG_MANIFEST)
    }

    pub fn verify(&self, regulator: &SigningIdentity) -> bool {
        regulator.verify(&self.signing_bytes(), &self.signature.0).unwrap_or(false)
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let program_id = r.string()?;
        let content_digest = r.array()?;
        let declared_purpose = r.string()?;
        let allowed_scope = Scope::read_fields(r)?;
        let signature = Signature(r.array()?);
        Ok(ProgramManifest { program_id, content_digest, declared_purpose, allowed_scope, signature })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentRecord {
    pub subject_vid: VirtualId,
    pub purpose_code: String,
    pub granted_at: Timestamp,
    pub renewed_at: Option<Timestamp>,
    pub opted_out_at: Option<Timestamp>,
    pub deletion_proof: Option<Hash32>,
    /// Deletion obligations raised by this record's opt-out.
    pub obligations: Vec<String>,
}

impl ConsentRecord {
    pub fn is_live(&self) -> bool {
        self.opted_out_at.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeletionObligation {
    pub obligation_id: String,
    pub subject_vid: VirtualId,
    pub purpose_code: String,
    /// The subject's identifier in the silo that must erase its records.
    pub target: VirtualId,
    pub issued_at: Timestamp,
}

/// Dual-signed evidence that a deletion obligation was fulfilled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeletionProof {
    pub obligation_id: String,
    pub target: VirtualId,
    pub record_ids: Vec<String>,
    pub digest: Hash32,
    pub controller_signature: Signature,
    pub regulator_signature: Signature,
}

impl DeletionProof {
    pub fn digest_of(record_ids: &[String]) -> Hash32 {
        let mut list = FieldList::new();
        for id in record_ids {
            list.str(id);
        }
        sha256(list.encode(TAG_DELETION_LIST).as_bytes())
    }

    pub fn signing_bytes(obligation_id: &str, target: &VirtualId, digest: &Hash32) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.str(obligation_id).str(&target.domain).uint(target.vid).bytes(digest);
        list.encode(TAG_DELETION_SIG)
    }

    pub fn verify(&self, controller: &SigningIdentity, regulator: &SigningIdentity) -> bool {
        let msg = Self::signing_bytes(&self.obligation_id, &self.target, &self.digest);
        self.digest == Self::digest_of(&self.record_ids)
            && controller.verify(&msg, &self.controller_signature.0).unwrap_or(false)
            && regulator.verify(&msg, &self.regulator_signature.0).unwrap_or(false)
    }
}

/// Digest stored in a consent record once all its obligations are met.
pub fn deletion_set_digest(proofs: &[Hash32]) -> Hash32 {
    let mut list = FieldList::new();
    for p in proofs {
        list.bytes(p);
    }
    sha256(list.encode(TAG_DELETION_SET).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DenyReason {
    Existence,
    Status,
    Window,
    Scope,
    PurposeMatch,
    Manifest,
    Consent,
}

impl DenyReason {
    pub const ORDER: [DenyReason; 7] = [
        DenyReason::Existence,
        DenyReason::Status,
        DenyReason::Window,
        DenyReason::Scope,
        DenyReason::PurposeMatch,
        DenyReason::Manifest,
        DenyReason::Consent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Existence => "Existence",
            DenyReason::Status => "Status",
            DenyReason::Window => "Window",
            DenyReason::Scope => "Scope",
            DenyReason::PurposeMatch => "PurposeMatch",
            DenyReason::Manifest => "Manifest",
            DenyReason::Consent => "Consent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ORDER.into_iter().find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny(DenyReason),
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::Allow => f.write_str("Allow"),
            Decision::Deny(r) => write!(f, "Deny({})", r.as_str()),
        }
    }
}

/// One signed journal line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub seq: u64,
    pub event: Vec<u8>,
    pub signature: Signature,
}

impl JournalEntry {
    fn signing_bytes(seq: u64, event: &[u8]) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.uint(seq).bytes(event);
        list.encode(TAG_JOURNAL)
    }

    pub fn to_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.uint(self.seq).bytes(&self.event).bytes(&self.signature.0);
        list.encode(TAG_JOURNAL)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_JOURNAL)?;
        let seq = r.uint()?;
        let event = r.bytes()?.to_vec();
        let signature = Signature(r.array()?);
        r.finish()?;
        Ok(JournalEntry { seq, event, signature })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum RegistryEvent {
    Purpose { code: String, description: String },
    Manifest(ProgramManifest),
    Authorization(Authorization),
    Consent { subject: VirtualId, purpose: String, at: Timestamp, renewal: bool },
    OptOut { subject: VirtualId, purpose: String, at: Timestamp, obligations: Vec<(String, VirtualId)> },
    Deleted(DeletionProof),
}

fn read_vid(r: &mut Reader<'_>) -> Result<VirtualId, DecodeError> {
    let domain = r.string()?;
    let vid = r.uint()?;
    Ok(VirtualId { domain, vid })
}

impl RegistryEvent {
    fn encode(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        match self {
            RegistryEvent::Purpose { code, description } => {
                list.str("purpose").str(code).str(description);
            }
            RegistryEvent::Manifest(m) => {
                list.str("manifest");
                m.push_body(&mut list);
                list.bytes(&m.signature.0);
            }
            RegistryEvent::Authorization(a) => {
                list.str("auth");
                a.push_body(&mut list);
                list.bytes(&a.signature.0);
            }
            RegistryEvent::Consent { subject, purpose, at, renewal } => {
                list.str("consent")
                    .str(&subject.domain)
                    .uint(subject.vid)
                    .str(purpose)
                    .uint(*at)
                    .uint(u64::from(*renewal));
            }
            RegistryEvent::OptOut { subject, purpose, at, obligations } => {
                list.str("optout").str(&subject.domain).uint(subject.vid).str(purpose).uint(*at);
                list.uint(obligations.len() as u64);
                for (id, target) in obligations {
                    list.str(id).str(&target.domain).uint(target.vid);
                }
            }
            RegistryEvent::Deleted(p) => {
                list.str("deleted").str(&p.obligation_id).str(&p.target.domain).uint(p.target.vid);
                list.uint(p.record_ids.len() as u64);
                for id in &p.record_ids {
                    list.str(id);
                }
                list.bytes(&p.digest).bytes(&p.controller_signature.0).bytes(&p.regulator_signature.0);
            }
        }
        list.encode(TAG_EVENT)
    }

    fn decode(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_EVENT)?;
        let event = match r.str()? {
            "purpose" => RegistryEvent::Purpose { code: r.string()?, description: r.string()? },
            "manifest" => RegistryEvent::Manifest(ProgramManifest::read(&mut r)?),
            "auth" => RegistryEvent::Authorization(Authorization::read(&mut r)?),
            "consent" => RegistryEvent::Consent {
                subject: read_vid(&mut r)?,
                purpose: r.string()?,
                at: r.uint()?,
                renewal: r.uint()? != 0,
            },
            "optout" => {
                let subject = read_vid(&mut r)?;
                let purpose = r.string()?;
                let at = r.uint()?;
                let n = r.uint()?;
                let mut obligations = Vec::new();
                for _ in 0..n {
                    obligations.push((r.string()?, read_vid(&mut r)?));
                }
                RegistryEvent::OptOut { subject, purpose, at, obligations }
            }
            "deleted" => {
                let obligation_id = r.string()?;
                let target = read_vid(&mut r)?;
                let n = r.uint()?;
                let mut record_ids = Vec::new();
                for _ in 0..n {
                    record_ids.push(r.string()?);
                }
                RegistryEvent::Deleted(DeletionProof {
                    obligation_id,
                    target,
                    record_ids,
                    digest: r.array()?,
                    controller_signature: Signature(r.array()?),
                    regulator_signature: Signature(r.array()?),
                })
            }
            _ => return Err(DecodeError::Range(1)),
        };
        r.finish()?;
        Ok(event)
    }
}

type ConsentKey = (VirtualId, String);

pub struct Registry {
    regulator: Signer,
    purposes: BTreeMap<String, String>,
    manifests: BTreeMap<String, ProgramManifest>,
    manifests_by_digest: BTreeMap<Hash32, String>,
    auths: BTreeMap<String, Authorization>,
    consents: BTreeMap<ConsentKey, Vec<ConsentRecord>>,
    obligations: BTreeMap<String, DeletionObligation>,
    proofs: BTreeMap<String, DeletionProof>,
    journal: Vec<JournalEntry>,
}

fn valid_purpose_code(code: &str) -> bool {
    !code.is_empty() && code.len() <= 64 && code.bytes().all(|b| b.is_ascii_graphic())
}

impl Registry {
    pub fn new(regulator: Signer) -> Self {
        Registry {
            regulator,
            purposes: BTreeMap::new(),
            manifests: BTreeMap::new(),
            manifests_by_digest: BTreeMap::new(),
            auths: BTreeMap::new(),
            consents: BTreeMap::new(),
            obligations: BTreeMap::new(),
            proofs: BTreeMap::new(),
            journal: Vec::new(),
        }
    }

    /// Rebuilds a registry from its journal, checking every signature.
    pub fn replay(regulator: Signer, entries: Vec<JournalEntry>) -> Result<Self, ReplayError> {
        let mut registry = Registry::new(regulator);
        for (i, entry) in entries.into_iter().enumerate() {
            if entry.seq != i as u64 {
                return Err(ReplayError::Sequence(entry.seq));
            }
            let msg = JournalEntry::signing_bytes(entry.seq, &entry.event);
            if !registry.regulator.identity().verify(&msg, &entry.signature.0).unwrap_or(false) {
                return Err(ReplayError::Signature(entry.seq));
            }
            let event = RegistryEvent::decode(&entry.event).map_err(|e| ReplayError::Decode(entry.seq, e))?;
            registry.apply(&event).map_err(|e| ReplayError::Apply(entry.seq, e))?;
            registry.journal.push(entry);
        }
        Ok(registry)
    }

    pub fn regulator(&self) -> &SigningIdentity {
        self.regulator.identity()
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    fn commit(&mut self, event: RegistryEvent) -> Result<(), RegistryError> {
        self.apply(&event)?;
        let seq = self.journal.len() as u64;
        let bytes = event.encode().into_vec();
        let signature = self.regulator.sign(&JournalEntry::signing_bytes(seq, &bytes));
        self.journal.push(JournalEntry { seq, event: bytes, signature });
        Ok(())
    }

    fn apply(&mut self, event: &RegistryEvent) -> Result<(), RegistryError> {
        match event {
            RegistryEvent::Purpose { code, description } => {
                self.purposes.insert(code.clone(), description.clone());
            }
            RegistryEvent::Manifest(m) => {
                self.manifests_by_digest.insert(m.content_digest, m.program_id.clone());
                self.manifests.insert(m.program_id.clone(), m.clone());
            }
            RegistryEvent::Authorization(a) => {
                self.auths.insert(a.auth_id.clone(), a.clone());
            }
            RegistryEvent::Consent { subject, purpose, at, renewal } => {
                let records = self.consents.entry((subject.clone(), purpose.clone())).or_default();
                match records.last_mut() {
                    Some(live) if live.is_live() && *renewal => live.renewed_at = Some(*at),
                    Some(live) if live.is_live() => {}
                    _ => records.push(ConsentRecord {
                        subject_vid: subject.clone(),
                        purpose_code: purpose.clone(),
                        granted_at: *at,
                        renewed_at: renewal.then_some(*at),
                        opted_out_at: None,
                        deletion_proof: None,
                        obligations: Vec::new(),
                    }),
                }
            }
            RegistryEvent::OptOut { subject, purpose, at, obligations } => {
                let record = self
                    .consents
                    .get_mut(&(subject.clone(), purpose.clone()))
                    .and_then(|r| r.last_mut())
                    .filter(|r| r.is_live())
                    .ok_or(RegistryError::NoConsentToWithdraw)?;
                record.opted_out_at = Some(*at);
                record.obligations = obligations.iter().map(|(id, _)| id.clone()).collect();
                if obligations.is_empty() {
                    record.deletion_proof = Some(deletion_set_digest(&[]));
                }
                for (id, target) in obligations {
                    self.obligations.insert(
                        id.clone(),
                        DeletionObligation {
                            obligation_id: id.clone(),
                            subject_vid: subject.clone(),
                            purpose_code: purpose.clone(),
                            target: target.clone(),
                            issued_at: *at,
                        },
                    );
                }
            }
            RegistryEvent::Deleted(proof) => {
                let obligation = self.obligations.get(&proof.obligation_id).ok_or(RegistryError::NotFound)?.clone();
                self.proofs.insert(proof.obligation_id.clone(), proof.clone());
                let key = (obligation.subject_vid.clone(), obligation.purpose_code.clone());
                let proofs = &self.proofs;
                if let Some(record) = self
                    .consents
                    .get_mut(&key)
                    .and_then(|rs| rs.iter_mut().find(|r| r.obligations.contains(&proof.obligation_id)))
                {
                    let digests: Option<Vec<Hash32>> =
                        record.obligations.iter().map(|id| proofs.get(id).map(|p| p.digest)).collect();
                    if let Some(digests) = digests {
                        record.deletion_proof = Some(deletion_set_digest(&digests));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn register_purpose(&mut self, code: &str, description: &str) -> Result<(), RegistryError> {
        if !valid_purpose_code(code) {
            return Err(RegistryError::InvalidPurpose(code.into()));
        }
        if self.purposes.contains_key(code) {
            return Err(RegistryError::DuplicatePurpose(code.into()));
        }
        self.commit(RegistryEvent::Purpose { code: code.into(), description: description.into() })
    }

    pub fn has_purpose(&self, code: &str) -> bool {
        self.purposes.contains_key(code)
    }

    pub fn purposes(&self) -> impl Iterator<Item = (&String, &String)> {
        self.purposes.iter()
    }

    fn require_purpose(&self, code: &str) -> Result<(), RegistryError> {
        if self.purposes.contains_key(code) {
            Ok(())
        } else {
            Err(RegistryError::UnknownPurpose(code.into()))
        }
    }

    pub fn sign_program(
        &mut self,
        program_id: &str,
        artifact: &[u8],
        declared_purpose: &str,
        allowed_scope: Scope,
    ) -> Result<ProgramManifest, RegistryError> {
        self.require_purpose(declared_purpose)?;
        if self.manifests.contains_key(program_id) {
            return Err(RegistryError::DuplicateProgram(program_id.into()));
        }
        let mut manifest = ProgramManifest {
            program_id: program_id.into(),
            content_digest: sha256(artifact),
            declared_purpose: declared_purpose.into(),
            allowed_scope,
            signature: Signature([0; 64]),
        };
        manifest.signature = self.regulator.sign(&manifest.signing_bytes());
        self.commit(RegistryEvent::Manifest(manifest.clone()))?;
        Ok(manifest)
    }

    pub fn manifest(&self, program_id: &str) -> Option<&ProgramManifest> {
        self.manifests.get(program_id)
    }

    pub fn manifests(&self) -> impl Iterator<Item = &ProgramManifest> {
        self.manifests.values()
    }

    pub fn manifest_by_digest(&self, digest: &Hash32) -> Option<&ProgramManifest> {
        self.manifests_by_digest.get(digest).and_then(|id| self.manifests.get(id))
    }

    /// Digest attestation of a program presented at request time.
    pub fn verify_program_runtime(&self, program_id: &str, content_digest: &Hash32) -> Result<bool, RegistryError> {
        let manifest = self.manifests.get(program_id).ok_or(RegistryError::NotFound)?;
        Ok(manifest.content_digest == *content_digest && manifest.verify(self.regulator()))
    }

    fn signed_auth(&self, mut auth: Authorization) -> Authorization {
        auth.signature = self.regulator.sign(&auth.signing_bytes());
        auth
    }

    pub fn grant(
        &mut self,
        grantee_key_id: &str,
        scope: Scope,
        purpose_code: &str,
        basis: Basis,
        valid_from: Timestamp,
        valid_until: Timestamp,
    ) -> Result<Authorization, RegistryError> {
        self.require_purpose(purpose_code)?;
        if valid_from >= valid_until {
            return Err(RegistryError::InvalidWindow);
        }
        let auth = self.signed_auth(Authorization {
            auth_id: format!("auth-{:04}", self.auths.len() + 1),
            grantee_key_id: grantee_key_id.into(),
            scope,
            purpose_code: purpose_code.into(),
            basis,
            valid_from,
            valid_until,
            status: AuthStatus::Active,
            signature: Signature([0; 64]),
        });
        self.commit(RegistryEvent::Authorization(auth.clone()))?;
        Ok(auth)
    }

    /// New authorization for a further purpose; consent-based grants wait
    /// for each subject's renewal.
    pub fn extend_purpose(&mut self, auth_id: &str, new_purpose: &str) -> Result<Authorization, RegistryError> {
        let original = self.auths.get(auth_id).ok_or(RegistryError::NotFound)?.clone();
        if original.status != AuthStatus::Active {
            return Err(RegistryError::NotActive(auth_id.into()));
        }
        self.require_purpose(new_purpose)?;
        let status = match original.basis {
            Basis::Legal => AuthStatus::Active,
            Basis::Consent => AuthStatus::PendingConsent,
        };
        let auth = self.signed_auth(Authorization {
            auth_id: format!("auth-{:04}", self.auths.len() + 1),
            purpose_code: new_purpose.into(),
            status,
            ..original
        });
        self.commit(RegistryEvent::Authorization(auth.clone()))?;
        Ok(auth)
    }

    pub fn set_status(&mut self, auth_id: &str, status: AuthStatus) -> Result<Authorization, RegistryError> {
        let current = self.auths.get(auth_id).ok_or(RegistryError::NotFound)?.clone();
        if !current.status.can_become(status) {
            return Err(RegistryError::InvalidTransition { from: current.status, to: status });
        }
        let auth = self.signed_auth(Authorization { status, ..current });
        self.commit(RegistryEvent::Authorization(auth.clone()))?;
        Ok(auth)
    }

    pub fn revoke(&mut self, auth_id: &str) -> Result<Authorization, RegistryError> {
        self.set_status(auth_id, AuthStatus::Revoked)
    }

    pub fn auth(&self, auth_id: &str) -> Option<&Authorization> {
        self.auths.get(auth_id)
    }

    pub fn auths(&self) -> impl Iterator<Item = &Authorization> {
        self.auths.values()
    }

    fn latest_consent(&self, subject: &VirtualId, purpose: &str) -> Option<&ConsentRecord> {
        self.consents.get(&(subject.clone(), String::from(purpose))).and_then(|r| r.last())
    }

    pub fn consent_live(&self, subject: &VirtualId, purpose: &str) -> bool {
        self.latest_consent(subject, purpose).is_some_and(ConsentRecord::is_live)
    }

    pub fn consent_history(&self, subject: &VirtualId, purpose: &str) -> &[ConsentRecord] {
        self.consents
            .get(&(subject.clone(), String::from(purpose)))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn consent_records(&self) -> impl Iterator<Item = &ConsentRecord> {
        self.consents.values().flatten()
    }

    /// Subjects with live consent for `purpose`.
    pub fn live_consenters(&self, purpose: &str) -> Vec<VirtualId> {
        self.consents
            .iter()
            .filter(|((_, p), records)| p == purpose && records.last().is_some_and(ConsentRecord::is_live))
            .map(|((s, _), _)| s.clone())
            .collect()
    }

    pub fn record_consent(&mut self, subject: &VirtualId, purpose: &str, now: Timestamp) -> Result<ConsentRecord, RegistryError> {
        self.require_purpose(purpose)?;
        self.commit(RegistryEvent::Consent { subject: subject.clone(), purpose: purpose.into(), at: now, renewal: false })?;
        Ok(self.latest_consent(subject, purpose).cloned().expect("consent just recorded"))
    }

    pub fn record_consent_renewal(
        &mut self,
        subject: &VirtualId,
        purpose: &str,
        now: Timestamp,
    ) -> Result<ConsentRecord, RegistryError> {
        self.require_purpose(purpose)?;
        self.commit(RegistryEvent::Consent { subject: subject.clone(), purpose: purpose.into(), at: now, renewal: true })?;
        Ok(self.latest_consent(subject, purpose).cloned().expect("consent just recorded"))
    }

    /// Withdraws consent and raises one deletion obligation per target in
    /// `holdings` (the subject's identifiers in silos that hold its data).
    pub fn opt_out(
        &mut self,
        subject: &VirtualId,
        purpose: &str,
        holdings: &[VirtualId],
        now: Timestamp,
    ) -> Result<(ConsentRecord, Vec<DeletionObligation>), RegistryError> {
        self.require_purpose(purpose)?;
        if !self.consent_live(subject, purpose) {
            return Err(RegistryError::NoConsentToWithdraw);
        }
        let base = self.obligations.len();
        let obligations: Vec<(String, VirtualId)> = holdings
            .iter()
            .enumerate()
            .map(|(i, target)| (format!("obl-{:04}", base + i + 1), target.clone()))
            .collect();
        let ids: Vec<String> = obligations.iter().map(|(id, _)| id.clone()).collect();
        self.commit(RegistryEvent::OptOut { subject: subject.clone(), purpose: purpose.into(), at: now, obligations })?;
        let record = self.latest_consent(subject, purpose).cloned().expect("consent exists");
        let raised = ids.iter().map(|id| self.obligations[id].clone()).collect();
        Ok((record, raised))
    }

    pub fn obligation(&self, obligation_id: &str) -> Option<&DeletionObligation> {
        self.obligations.get(obligation_id)
    }

    pub fn pending_obligations(&self) -> Vec<DeletionObligation> {
        self.obligations
            .values()
            .filter(|o| !self.proofs.contains_key(&o.obligation_id))
            .cloned()
            .collect()
    }

    pub fn deletion_proofs(&self) -> impl Iterator<Item = &DeletionProof> {
        self.proofs.values()
    }

    pub fn complete_deletion(&mut self, proof: DeletionProof, controller: &SigningIdentity) -> Result<(), RegistryError> {
        let obligation = self.obligations.get(&proof.obligation_id).ok_or(RegistryError::NotFound)?;
        if self.proofs.contains_key(&proof.obligation_id)
            || obligation.target != proof.target
            || !proof.verify(controller, self.regulator())
        {
            return Err(RegistryError::BadDeletionProof);
        }
        self.commit(RegistryEvent::Deleted(proof))
    }

    /// Sign a deletion digest as the regulator.
    pub fn countersign_deletion(&self, obligation_id: &str, target: &VirtualId, digest: &Hash32) -> Signature {
        self.regulator.sign(&DeletionProof::signing_bytes(obligation_id, target, digest))
    }

    /// Pure decision over current registry state. Reasons are reported in
    /// the fixed order of [`DenyReason::ORDER`]; the first failure wins.
    pub fn check(
        &self,
        auth_id: &str,
        program_digest: &Hash32,
        requested_scope: &Scope,
        purpose_code: &str,
        subject: &VirtualId,
        now: Timestamp,
    ) -> Decision {
        let Some(auth) = self.auths.get(auth_id).filter(|a| a.verify(self.regulator())) else {
            return Decision::Deny(DenyReason::Existence);
        };
        if auth.status == AuthStatus::Revoked {
            return Decision::Deny(DenyReason::Status);
        }
        if !auth.in_window(now) {
            return Decision::Deny(DenyReason::Window);
        }
        if !requested_scope.is_within(&auth.scope) {
            return Decision::Deny(DenyReason::Scope);
        }
        let manifest = self.manifest_by_digest(program_digest);
        if purpose_code != auth.purpose_code || manifest.is_some_and(|m| m.declared_purpose != purpose_code) {
            return Decision::Deny(DenyReason::PurposeMatch);
        }
        match manifest {
            Some(m) if m.verify(self.regulator()) && requested_scope.is_within(&m.allowed_scope) => {}
            _ => return Decision::Deny(DenyReason::Manifest),
        }
        if auth.basis == Basis::Consent && !self.consent_live(subject, &auth.purpose_code) {
            return Decision::Deny(DenyReason::Consent);
        }
        Decision::Allow
    }

    /// Subjects named in opt-outs, for harness bookkeeping.
    pub fn opted_out_pairs(&self) -> BTreeSet<(VirtualId, String)> {
        self.consents
            .iter()
            .filter(|(_, rs)| rs.iter().any(|r| r.opted_out_at.is_some()))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Role;
    use crate::ids::{FieldClass, Operation};

    fn registry() -> Registry {
        let mut r = Registry::new(Signer::from_seed("regulator", Role::Regulator, [5; 32]));
        r.register_purpose("TAX_AUDIT", "annual audit").unwrap();
        r.register_purpose("RESEARCH", "epidemiology").unwrap();
        r
    }

    fn scope() -> Scope {
        Scope::new(Operation::Read, ["tax"], [FieldClass::Financial])
    }

    fn subject() -> VirtualId {
        VirtualId::new("consent", 77)
    }

    #[test]
    fn purpose_registration() {
        let mut r = registry();
        assert_eq!(
            r.register_purpose("TAX_AUDIT", "again"),
            Err(RegistryError::DuplicatePurpose("TAX_AUDIT".into()))
        );
        assert_eq!(
            r.grant("ctl", scope(), "NOPE", Basis::Legal, 0, 10).unwrap_err(),
            RegistryError::UnknownPurpose("NOPE".into())
        );
        assert!(r.grant("ctl", scope(), "TAX_AUDIT", Basis::Legal, 0, 10).is_ok());
        assert!(matches!(r.register_purpose("has space", ""), Err(RegistryError::InvalidPurpose(_))));
    }

    #[test]
    fn manifest_digest_and_signature() {
        let mut r = registry();
        let m = r.sign_program("prog", b"artifact", "TAX_AUDIT", scope()).unwrap();
        assert_eq!(m.content_digest, sha256(b"artifact"));
        assert!(m.verify(r.regulator()));
        assert_eq!(r.verify_program_runtime("prog", &sha256(b"artifact")), Ok(true));
        assert_eq!(r.verify_program_runtime("prog", &sha256(b"artifacT")), Ok(false));
        assert_eq!(r.verify_program_runtime("ghost", &m.content_digest), Err(RegistryError::NotFound));
        assert!(matches!(r.sign_program("p2", b"x", "NOPE", scope()), Err(RegistryError::UnknownPurpose(_))));
    }

    #[test]
    fn inverted_window_rejected() {
        let mut r = registry();
        assert_eq!(
            r.grant("ctl", scope(), "TAX_AUDIT", Basis::Legal, 10, 5).unwrap_err(),
            RegistryError::InvalidWindow
        );
    }

    #[test]
    fn legal_basis_skips_consent_but_consent_basis_needs_it() {
        let mut r = registry();
        let m = r.sign_program("prog", b"a", "TAX_AUDIT", scope()).unwrap();
        let legal = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Legal, 0, 100).unwrap();
        let consent = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Consent, 0, 100).unwrap();
        let s = subject();
        assert_eq!(r.check(&legal.auth_id, &m.content_digest, &scope(), "TAX_AUDIT", &s, 5), Decision::Allow);
        assert_eq!(
            r.check(&consent.auth_id, &m.content_digest, &scope(), "TAX_AUDIT", &s, 5),
            Decision::Deny(DenyReason::Consent)
        );
        r.record_consent(&s, "TAX_AUDIT", 1).unwrap();
        assert_eq!(r.check(&consent.auth_id, &m.content_digest, &scope(), "TAX_AUDIT", &s, 5), Decision::Allow);
        r.opt_out(&s, "TAX_AUDIT", &[], 6).unwrap();
        assert_eq!(
            r.check(&consent.auth_id, &m.content_digest, &scope(), "TAX_AUDIT", &s, 7),
            Decision::Deny(DenyReason::Consent)
        );
        r.record_consent(&s, "TAX_AUDIT", 8).unwrap();
        assert_eq!(r.check(&consent.auth_id, &m.content_digest, &scope(), "TAX_AUDIT", &s, 9), Decision::Allow);
        assert_eq!(r.consent_history(&s, "TAX_AUDIT").len(), 2);
    }

    #[test]
    fn opt_out_without_consent() {
        let mut r = registry();
        assert_eq!(r.opt_out(&subject(), "TAX_AUDIT", &[], 0).unwrap_err(), RegistryError::NoConsentToWithdraw);
    }

    #[test]
    fn consent_extension_is_pending_until_renewal() {
        let mut r = registry();
        let s = subject();
        let other = VirtualId::new("consent", 78);
        r.sign_program("research", b"r", "RESEARCH", scope()).unwrap();
        let digest = sha256(b"r");
        let original = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Consent, 0, 100).unwrap();
        r.record_consent(&s, "TAX_AUDIT", 0).unwrap();
        r.record_consent(&other, "TAX_AUDIT", 0).unwrap();
        let ext = r.extend_purpose(&original.auth_id, "RESEARCH").unwrap();
        assert_eq!(ext.status, AuthStatus::PendingConsent);
        assert_ne!(ext.auth_id, original.auth_id);
        assert_eq!(r.live_consenters("TAX_AUDIT"), [s.clone(), other.clone()]);
        assert_eq!(r.check(&ext.auth_id, &digest, &scope(), "RESEARCH", &s, 5), Decision::Deny(DenyReason::Consent));
        let renewed = r.record_consent_renewal(&s, "RESEARCH", 6).unwrap();
        assert_eq!(renewed.renewed_at, Some(6));
        assert_eq!(r.check(&ext.auth_id, &digest, &scope(), "RESEARCH", &s, 7), Decision::Allow);
        assert_eq!(
            r.check(&ext.auth_id, &digest, &scope(), "RESEARCH", &other, 7),
            Decision::Deny(DenyReason::Consent)
        );
    }

    #[test]
    fn legal_extension_is_active() {
        let mut r = registry();
        let original = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Legal, 0, 100).unwrap();
        let ext = r.extend_purpose(&original.auth_id, "RESEARCH").unwrap();
        assert_eq!(ext.status, AuthStatus::Active);
        assert_eq!(r.extend_purpose("auth-9999", "RESEARCH").unwrap_err(), RegistryError::NotFound);
    }

    #[test]
    fn status_transitions() {
        let mut r = registry();
        let a = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Legal, 0, 100).unwrap();
        let revoked = r.revoke(&a.auth_id).unwrap();
        assert!(revoked.verify(r.regulator()));
        assert!(matches!(
            r.set_status(&a.auth_id, AuthStatus::Active),
            Err(RegistryError::InvalidTransition { .. })
        ));
        assert!(matches!(r.extend_purpose(&a.auth_id, "RESEARCH"), Err(RegistryError::NotActive(_))));
    }

    #[test]
    fn journal_replay_rebuilds_state() {
        let mut r = registry();
        let s = subject();
        r.sign_program("prog", b"a", "TAX_AUDIT", scope()).unwrap();
        let a = r.grant("ctl", scope(), "TAX_AUDIT", Basis::Consent, 0, 100).unwrap();
        r.record_consent(&s, "TAX_AUDIT", 1).unwrap();
        r.extend_purpose(&a.auth_id, "RESEARCH").unwrap();
        r.opt_out(&s, "TAX_AUDIT", &[VirtualId::new("tax", 9)], 3).unwrap();
        let entries: Vec<JournalEntry> = r
            .journal()
            .iter()
            .map(|e| JournalEntry::from_bytes(e.to_bytes().as_bytes()).unwrap())
            .collect();
        let replayed = Registry::replay(Signer::from_seed("regulator", Role::Regulator, [5; 32]), entries.clone()).unwrap();
        assert_eq!(replayed.journal(), r.journal());
        assert_eq!(replayed.auths().collect::<Vec<_>>(), r.auths().collect::<Vec<_>>());
        assert_eq!(replayed.pending_obligations(), r.pending_obligations());
        assert_eq!(replayed.consent_history(&s, "TAX_AUDIT"), r.consent_history(&s, "TAX_AUDIT"));

        let mut tampered = entries;
        tampered[1].event[10] ^= 1;
        assert!(matches!(
            Registry::replay(Signer::from_seed("regulator", Role::Regulator, [5; 32]), tampered),
            Err(ReplayError::Signature(1))
        ));
    }
}
