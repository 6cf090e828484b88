//! The regulator's online enforcement point: signed requests in, tickets
//! carrying regulator key shares out.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{CanonicalBytes, DecodeError, FieldList, Reader};
use crate::crypto::{sha256, Hash32, KeyShare, Custodian, Signature, Signer, SigningIdentity};
use crate::ids::{Scope, Timestamp, VirtualId};
use crate::registry::DenyReason;

pub const TICKET_TTL: u64 = 60;
pub const FRESHNESS_WINDOW: u64 = 300;

const TAG_REQUEST: &str = "REQv1";
const TAG_TICKET: &str = "TICKv1";

/// Why a well-formed request was refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Denial {
    Signature,
    Replay,
    Stale,
    /// Requester is not the authorization's grantee.
    Grantee,
    Registry(DenyReason),
}

impl Denial {
    pub fn as_str(self) -> &'static str {
        match self {
            Denial::Signature => "Signature",
            Denial::Replay => "Replay",
            Denial::Stale => "Stale",
            Denial::Grantee => "Grantee",
            Denial::Registry(r) => r.as_str(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Signature" => Some(Denial::Signature),
            "Replay" => Some(Denial::Replay),
            "Stale" => Some(Denial::Stale),
            "Grantee" => Some(Denial::Grantee),
            other => DenyReason::parse(other).map(Denial::Registry),
        }
    }
}

impl fmt::Display for Denial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Deny({})", self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("{0}")]
    Denied(Denial),
    #[error("protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TicketError {
    #[error("ticket signature invalid")]
    Forged,
    #[error("ticket expired")]
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum OpenError {
    #[error("ticket signature invalid")]
    InvalidTicket,
    #[error("ticket expired")]
    TicketExpired,
    #[error("ticket already used for this record")]
    TicketConsumed,
    #[error("record outside ticket scope")]
    ScopeViolation,
    #[error("decryption failed")]
    DecryptFailure,
    #[error("record not found")]
    NotFound,
}

impl OpenError {
    pub fn as_str(self) -> &'static str {
        match self {
            OpenError::InvalidTicket => "InvalidTicket",
            OpenError::TicketExpired => "TicketExpired",
            OpenError::TicketConsumed => "TicketConsumed",
            OpenError::ScopeViolation => "ScopeViolation",
            OpenError::DecryptFailure => "DecryptFailure",
            OpenError::NotFound => "NotFound",
        }
    }
}

/// Fields of a request before signing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestDraft {
    pub request_id: String,
    pub program_id: String,
    pub content_digest: Hash32,
    pub auth_id: String,
    pub scope: Scope,
    pub subjects: Vec<VirtualId>,
    pub purpose_code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRequest {
    pub request_id: String,
    pub requester_key_id: String,
    pub program_id: String,
    pub content_digest: Hash32,
    pub auth_id: String,
    pub scope: Scope,
    pub subjects: Vec<VirtualId>,
    pub purpose_code: String,
    pub nonce: [u8; 16],
    pub timestamp: Timestamp,
    pub signature: Signature,
}

impl AccessRequest {
    pub fn sign(draft: RequestDraft, signer: &Signer, nonce: [u8; 16], timestamp: Timestamp) -> Self {
        let mut req = AccessRequest {
            request_id: draft.request_id,
            requester_key_id: signer.key_id().into(),
            program_id: draft.program_id,
            content_digest: draft.content_digest,
            auth_id: draft.auth_id,
            scope: draft.scope,
            subjects: draft.subjects,
            purpose_code: draft.purpose_code,
            nonce,
            timestamp,
            signature: Signature([0; 64]),
        };
        req.signature = signer.sign(&req.signing_bytes());
        req
    }

    fn push_body<'a>(&'a self, list: &mut FieldList<'a>) {
        list.str(&self.request_id)
            .str(&self.requester_key_id)
            .str(&self.program_id)
            .bytes(&self.content_digest)
            .str(&self.auth_id);
        self.scope.push_fields(list);
        list.uint(self.subjects.len() as u64);
        for s in &self.subjects {
            list.str(&s.domain).uint(s.vid);
        }
        list.str(&self.purpose_code).bytes(&self.nonce).uint(self.timestamp);
    }

    pub fn signing_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.encode(TAG_REQUEST)
    }

    /// Wire form: the signed body followed by the signature.
    pub fn to_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.bytes(&self.signature.0);
        list.encode(TAG_REQUEST)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_REQUEST)?;
        let request_id = r.string()?;
        let requester_key_id = r.string()?;
        let program_id = r.string()?;
        let content_digest = r.array()?;
        let auth_id = r.string()?;
        let scope = Scope::read_fields(&mut r)?;
        let n = r.uint()?;
        let mut subjects = Vec::new();
        for _ in 0..n {
            let domain = r.string()?;
            subjects.push(VirtualId { domain, vid: r.uint()? });
        }
        let purpose_code = r.string()?;
        let nonce = r.array()?;
        let timestamp = r.uint()?;
        let signature = Signature(r.array()?);
        r.finish()?;
        Ok(AccessRequest {
            request_id,
            requester_key_id,
            program_id,
            content_digest,
            auth_id,
            scope,
            subjects,
            purpose_code,
            nonce,
            timestamp,
            signature,
        })
    }

    /// Digest of the wire form, recorded in both ledgers.
    pub fn digest(&self) -> Hash32 {
        sha256(self.to_bytes().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessTicket {
    pub ticket_id: String,
    pub request_id: String,
    pub grantee: String,
    pub purpose_code: String,
    pub granted_scope: Scope,
    pub subjects: Vec<VirtualId>,
    pub regulator_shares: BTreeMap<String, KeyShare>,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub signature: Signature,
}

impl AccessTicket {
    fn push_body<'a>(&'a self, list: &mut FieldList<'a>) {
        list.str(&self.ticket_id).str(&self.request_id).str(&self.grantee).str(&self.purpose_code);
        self.granted_scope.push_fields(list);
        list.uint(self.subjects.len() as u64);
        for s in &self.subjects {
            list.str(&s.domain).uint(s.vid);
        }
        list.uint(self.regulator_shares.len() as u64);
        for (id, share) in &self.regulator_shares {
            list.str(id).bytes(&share.share);
        }
        list.uint(self.issued_at).uint(self.expires_at);
    }

    pub fn signing_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.encode(TAG_TICKET)
    }

    pub fn to_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        self.push_body(&mut list);
        list.bytes(&self.signature.0);
        list.encode(TAG_TICKET)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_TICKET)?;
        let ticket_id = r.string()?;
        let request_id = r.string()?;
        let grantee = r.string()?;
        let purpose_code = r.string()?;
        let granted_scope = Scope::read_fields(&mut r)?;
        let n = r.uint()?;
        let mut subjects = Vec::new();
        for _ in 0..n {
            let domain = r.string()?;
            subjects.push(VirtualId { domain, vid: r.uint()? });
        }
        let n = r.uint()?;
        let mut regulator_shares = BTreeMap::new();
        for _ in 0..n {
            let id = r.string()?;
            regulator_shares.insert(id, KeyShare { share: r.array()?, holder: Custodian::Regulator });
        }
        let issued_at = r.uint()?;
        let expires_at = r.uint()?;
        let signature = Signature(r.array()?);
        r.finish()?;
        Ok(AccessTicket {
            ticket_id,
            request_id,
            grantee,
            purpose_code,
            granted_scope,
            subjects,
            regulator_shares,
            issued_at,
            expires_at,
            signature,
        })
    }

    /// Regulator signature and lifetime; scope checks are the caller's.
    pub fn validate(&self, regulator: &SigningIdentity, now: Timestamp) -> Result<(), TicketError> {
        if !regulator.verify(&self.signing_bytes(), &self.signature.0).unwrap_or(false) {
            return Err(TicketError::Forged);
        }
        if now < self.issued_at || now >= self.expires_at {
            return Err(TicketError::Expired);
        }
        Ok(())
    }
}

/// Regulator-held share of a stored record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deposit {
    pub record_id: String,
    pub vid: VirtualId,
    pub share: KeyShare,
}

/// Persistent gate state.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub nonces: Vec<(String, [u8; 16], Timestamp)>,
    pub request_ids: Vec<String>,
    pub consumed: Vec<(String, String)>,
    pub deposits: Vec<Deposit>,
    pub tickets_issued: u64,
    pub releases: u64,
}

/// Replay window, single-use bookkeeping and the regulator's share deposits.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessGate {
    nonces: BTreeMap<(String, [u8; 16]), Timestamp>,
    request_ids: BTreeSet<String>,
    consumed: BTreeSet<(String, String)>,
    deposits: BTreeMap<String, Deposit>,
    tickets_issued: u64,
    releases: u64,
}

impl AccessGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn deposit(&mut self, record_id: &str, vid: &VirtualId, share: KeyShare) {
        self.deposits
            .insert(record_id.into(), Deposit { record_id: record_id.into(), vid: vid.clone(), share });
    }

    pub fn deposit_for(&self, record_id: &str) -> Option<&Deposit> {
        self.deposits.get(record_id)
    }

    pub fn deposits(&self) -> impl Iterator<Item = &Deposit> {
        self.deposits.values()
    }

    pub fn deposits_of<'a>(&'a self, vid: &'a VirtualId) -> impl Iterator<Item = &'a Deposit> + 'a {
        self.deposits.values().filter(move |d| &d.vid == vid)
    }

    /// Destroys the regulator shares of `record_ids`; returns how many existed.
    pub fn destroy(&mut self, record_ids: &[String]) -> usize {
        record_ids.iter().filter(|id| self.deposits.remove(id.as_str()).is_some()).count()
    }

    /// Check-and-set on the replay window. Returns false if seen before.
    pub(crate) fn admit(&mut self, request: &AccessRequest, now: Timestamp) -> bool {
        let horizon = now.saturating_sub(2 * FRESHNESS_WINDOW);
        self.nonces.retain(|_, ts| *ts >= horizon);
        let key = (request.requester_key_id.clone(), request.nonce);
        if self.nonces.contains_key(&key) || self.request_ids.contains(&request.request_id) {
            return false;
        }
        self.nonces.insert(key, request.timestamp.max(now));
        self.request_ids.insert(request.request_id.clone());
        true
    }

    pub(crate) fn next_ticket_id(&mut self) -> String {
        self.tickets_issued += 1;
        alloc::format!("tkt-{:04}", self.tickets_issued)
    }

    pub fn is_consumed(&self, ticket_id: &str, record_id: &str) -> bool {
        self.consumed.contains(&(ticket_id.into(), record_id.into()))
    }

    pub(crate) fn consume(&mut self, ticket_id: &str, record_id: &str) {
        self.consumed.insert((ticket_id.into(), record_id.into()));
        self.releases += 1;
    }

    pub fn consumed_count(&self) -> usize {
        self.consumed.len()
    }

    /// Plaintext records released through `open_record`.
    pub fn releases(&self) -> u64 {
        self.releases
    }

    pub fn tickets_issued(&self) -> u64 {
        self.tickets_issued
    }

    pub fn snapshot(&self) -> GateSnapshot {
        GateSnapshot {
            nonces: self.nonces.iter().map(|((k, n), t)| (k.clone(), *n, *t)).collect(),
            request_ids: self.request_ids.iter().cloned().collect(),
            consumed: self.consumed.iter().cloned().collect(),
            deposits: self.deposits.values().cloned().collect(),
            tickets_issued: self.tickets_issued,
            releases: self.releases,
        }
    }

    pub fn from_snapshot(s: GateSnapshot) -> Self {
        AccessGate {
            nonces: s.nonces.into_iter().map(|(k, n, t)| ((k, n), t)).collect(),
            request_ids: s.request_ids.into_iter().collect(),
            consumed: s.consumed.into_iter().collect(),
            deposits: s.deposits.into_iter().map(|d| (d.record_id.clone(), d)).collect(),
            tickets_issued: s.tickets_issued,
            releases: s.releases,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Role;
    use alloc::string::ToString;
    use crate::ids::{FieldClass, Operation};
    use alloc::vec;

    fn draft() -> RequestDraft {
        RequestDraft {
            request_id: "req-1".into(),
            program_id: "prog".into(),
            content_digest: [7; 32],
            auth_id: "auth-0001".into(),
            scope: Scope::new(Operation::Read, ["tax"], [FieldClass::Financial]),
            subjects: vec![VirtualId::new("tax", 3)],
            purpose_code: "TAX".into(),
        }
    }

    #[test]
    fn request_wire_round_trip_and_signature() {
        let signer = Signer::from_seed("ctl", Role::Controller, [1; 32]);
        let req = AccessRequest::sign(draft(), &signer, [9; 16], 100);
        let back = AccessRequest::from_bytes(req.to_bytes().as_bytes()).unwrap();
        assert_eq!(back, req);
        assert!(signer.identity().verify(&back.signing_bytes(), &back.signature.0).unwrap());
        let mut tampered = back.clone();
        tampered.purpose_code = "OTHER".into();
        assert!(!signer.identity().verify(&tampered.signing_bytes(), &tampered.signature.0).unwrap());
    }

    #[test]
    fn ticket_validation() {
        let reg = Signer::from_seed("reg", Role::Regulator, [2; 32]);
        let mut t = AccessTicket {
            ticket_id: "tkt-0001".into(),
            request_id: "req-1".into(),
            grantee: "ctl".into(),
            purpose_code: "TAX".into(),
            granted_scope: draft().scope,
            subjects: draft().subjects,
            regulator_shares: [("rec-1".into(), KeyShare { share: [5; 32], holder: Custodian::Regulator })].into(),
            issued_at: 100,
            expires_at: 100 + TICKET_TTL,
            signature: Signature([0; 64]),
        };
        t.signature = reg.sign(&t.signing_bytes());
        assert_eq!(AccessTicket::from_bytes(t.to_bytes().as_bytes()).unwrap(), t);
        assert_eq!(t.validate(reg.identity(), 100), Ok(()));
        assert_eq!(t.validate(reg.identity(), 159), Ok(()));
        assert_eq!(t.validate(reg.identity(), 160), Err(TicketError::Expired));
        t.expires_at += 1000;
        assert_eq!(t.validate(reg.identity(), 500), Err(TicketError::Forged));
    }

    #[test]
    fn replay_window() {
        let signer = Signer::from_seed("ctl", Role::Controller, [1; 32]);
        let mut gate = AccessGate::new();
        let req = AccessRequest::sign(draft(), &signer, [9; 16], 100);
        assert!(gate.admit(&req, 100));
        assert!(!gate.admit(&req, 101));
        let mut other = draft();
        other.request_id = "req-2".into();
        let same_nonce = AccessRequest::sign(other.clone(), &signer, [9; 16], 100);
        assert!(!gate.admit(&same_nonce, 102));
        let fresh = AccessRequest::sign(other, &signer, [8; 16], 100);
        assert!(gate.admit(&fresh, 103));
    }

    #[test]
    fn denial_names() {
        for d in [Denial::Signature, Denial::Replay, Denial::Stale, Denial::Grantee, Denial::Registry(DenyReason::Consent)] {
            assert_eq!(Denial::parse(d.as_str()), Some(d));
        }
        assert_eq!(Denial::Registry(DenyReason::Window).to_string(), "Deny(Window)");
    }
}
