//! Events recorded in both audit ledgers.
//!
//! The ledger signs only the digest of an event; the canonical event bytes
//! travel with the entry so auditors can rebuild who was affected by what.
//! [`AuditEvent::notifications`] is the single definition of which
//! (subject, request) pairs an event must be reported to.

use alloc::string::String;
use alloc::vec::Vec;

use crate::canon::{CanonicalBytes, DecodeError, FieldList, Reader};
use crate::crypto::Hash32;
use crate::gate::Denial;
use crate::ids::{Operation, Scope, VirtualId};
use crate::notifier::Outcome;

const TAG_EVENT: &str = "EVTv1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOutcome {
    Allowed { ticket_id: String },
    Denied(Denial),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditEvent {
    /// A well-formed gate submission and its decision.
    Access {
        request_id: String,
        request_digest: Hash32,
        requester: String,
        auth_id: String,
        purpose: String,
        scope: Scope,
        subjects: Vec<VirtualId>,
        outcome: AccessOutcome,
    },
    /// A submission rejected before any subject could be identified.
    Protocol { request_digest: Hash32, reason: String },
    /// A record open attempt; `result` is `released` or the error kind.
    Open { ticket_id: String, request_id: String, record_id: String, result: String },
    /// Vault resolve or link; `result` is `ok` or the error kind.
    Vault {
        operation: Operation,
        ticket_id: String,
        request_id: String,
        subject: VirtualId,
        target_domain: String,
        purpose: String,
        grantee: String,
        result: String,
    },
    AliasRoute { alias: String, result: String },
    /// Purpose extension notices sent to subjects.
    Notice { auth_id: String, purpose: String, outcome: Outcome, subjects: Vec<VirtualId> },
    Deletion {
        obligation_id: String,
        subject: VirtualId,
        purpose: String,
        target: VirtualId,
        record_ids: Vec<String>,
        proof_digest: Hash32,
    },
}

fn push_vid<'a>(list: &mut FieldList<'a>, vid: &'a VirtualId) {
    list.str(&vid.domain).uint(vid.vid);
}

fn read_vid(r: &mut Reader<'_>) -> Result<VirtualId, DecodeError> {
    let domain = r.string()?;
    Ok(VirtualId { domain, vid: r.uint()? })
}

fn read_vids(r: &mut Reader<'_>) -> Result<Vec<VirtualId>, DecodeError> {
    let n = r.uint()?;
    (0..n).map(|_| read_vid(r)).collect()
}

impl AuditEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            AuditEvent::Access { .. } => "access",
            AuditEvent::Protocol { .. } => "protocol",
            AuditEvent::Open { .. } => "open",
            AuditEvent::Vault { .. } => "vault",
            AuditEvent::AliasRoute { .. } => "route",
            AuditEvent::Notice { .. } => "notice",
            AuditEvent::Deletion { .. } => "deletion",
        }
    }

    /// One per gate submission, whether decided or malformed.
    pub fn is_submission(&self) -> bool {
        matches!(self, AuditEvent::Access { .. } | AuditEvent::Protocol { .. })
    }

    pub fn encode(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.str(self.kind());
        match self {
            AuditEvent::Access { request_id, request_digest, requester, auth_id, purpose, scope, subjects, outcome } => {
                list.str(request_id).bytes(request_digest).str(requester).str(auth_id).str(purpose);
                scope.push_fields(&mut list);
                list.uint(subjects.len() as u64);
                for s in subjects {
                    push_vid(&mut list, s);
                }
                match outcome {
                    AccessOutcome::Allowed { ticket_id } => list.str("allowed").str(ticket_id),
                    AccessOutcome::Denied(d) => list.str("denied").str(d.as_str()),
                };
            }
            AuditEvent::Protocol { request_digest, reason } => {
                list.bytes(request_digest).str(reason);
            }
            AuditEvent::Open { ticket_id, request_id, record_id, result } => {
                list.str(ticket_id).str(request_id).str(record_id).str(result);
            }
            AuditEvent::Vault { operation, ticket_id, request_id, subject, target_domain, purpose, grantee, result } => {
                list.str(operation.as_str()).str(ticket_id).str(request_id);
                push_vid(&mut list, subject);
                list.str(target_domain).str(purpose).str(grantee).str(result);
            }
            AuditEvent::AliasRoute { alias, result } => {
                list.str(alias).str(result);
            }
            AuditEvent::Notice { auth_id, purpose, outcome, subjects } => {
                list.str(auth_id).str(purpose).str(outcome.as_str()).uint(subjects.len() as u64);
                for s in subjects {
                    push_vid(&mut list, s);
                }
            }
            AuditEvent::Deletion { obligation_id, subject, purpose, target, record_ids, proof_digest } => {
                list.str(obligation_id);
                push_vid(&mut list, subject);
                list.str(purpose);
                push_vid(&mut list, target);
                list.uint(record_ids.len() as u64);
                for id in record_ids {
                    list.str(id);
                }
                list.bytes(proof_digest);
            }
        }
        list.encode(TAG_EVENT)
    }

    pub fn decode(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_EVENT)?;
        let bad = || DecodeError::Range(1);
        let event = match r.str()? {
            "access" => {
                let request_id = r.string()?;
                let request_digest = r.array()?;
                let requester = r.string()?;
                let auth_id = r.string()?;
                let purpose = r.string()?;
                let scope = Scope::read_fields(&mut r)?;
                let subjects = read_vids(&mut r)?;
                let outcome = match r.str()? {
                    "allowed" => AccessOutcome::Allowed { ticket_id: r.string()? },
                    "denied" => AccessOutcome::Denied(Denial::parse(r.str()?).ok_or_else(bad)?),
                    _ => return Err(bad()),
                };
                AuditEvent::Access { request_id, request_digest, requester, auth_id, purpose, scope, subjects, outcome }
            }
            "protocol" => AuditEvent::Protocol { request_digest: r.array()?, reason: r.string()? },
            "open" => AuditEvent::Open {
                ticket_id: r.string()?,
                request_id: r.string()?,
                record_id: r.string()?,
                result: r.string()?,
            },
            "vault" => AuditEvent::Vault {
                operation: r.str()?.parse().map_err(|_| bad())?,
                ticket_id: r.string()?,
                request_id: r.string()?,
                subject: read_vid(&mut r)?,
                target_domain: r.string()?,
                purpose: r.string()?,
                grantee: r.string()?,
                result: r.string()?,
            },
            "route" => AuditEvent::AliasRoute { alias: r.string()?, result: r.string()? },
            "notice" => AuditEvent::Notice {
                auth_id: r.string()?,
                purpose: r.string()?,
                outcome: Outcome::parse(r.str()?).ok_or_else(bad)?,
                subjects: read_vids(&mut r)?,
            },
            "deletion" => {
                let obligation_id = r.string()?;
                let subject = read_vid(&mut r)?;
                let purpose = r.string()?;
                let target = read_vid(&mut r)?;
                let n = r.uint()?;
                let record_ids = (0..n).map(|_| r.string()).collect::<Result<_, _>>()?;
                AuditEvent::Deletion { obligation_id, subject, purpose, target, record_ids, proof_digest: r.array()? }
            }
            _ => return Err(bad()),
        };
        r.finish()?;
        Ok(event)
    }

    /// The (subject, request, outcome, summary) notifications this event owes.
    pub fn notifications(&self) -> Vec<(VirtualId, String, Outcome, String)> {
        match self {
            AuditEvent::Access { request_id, requester, purpose, scope, subjects, outcome, .. } => {
                let (o, detail) = match outcome {
                    AccessOutcome::Allowed { .. } => (Outcome::Allowed, String::from("Allow")),
                    AccessOutcome::Denied(d) => (Outcome::Denied, alloc::format!("{d}")),
                };
                let summary = alloc::format!("purpose={purpose} scope={scope} grantee={requester} decision={detail}");
                subjects.iter().map(|s| (s.clone(), request_id.clone(), o, summary.clone())).collect()
            }
            AuditEvent::Vault { operation, ticket_id, subject, target_domain, purpose, grantee, result, .. }
                if result == "ok" =>
            {
                let summary = alloc::format!(
                    "purpose={purpose} scope={}/{}{}/ grantee={grantee} decision=Allow",
                    operation.as_str(),
                    subject.domain,
                    if target_domain.is_empty() { String::new() } else { alloc::format!(",{target_domain}") },
                );
                alloc::vec![(subject.clone(), ticket_id.clone(), Outcome::Allowed, summary)]
            }
            AuditEvent::Notice { auth_id, purpose, outcome, subjects } => {
                let summary = alloc::format!("purpose={purpose} authorization={auth_id}");
                subjects.iter().map(|s| (s.clone(), auth_id.clone(), *outcome, summary.clone())).collect()
            }
            AuditEvent::Deletion { obligation_id, subject, purpose, target, record_ids, .. } => {
                let summary = alloc::format!("purpose={purpose} domain={} records_deleted={}", target.domain, record_ids.len());
                alloc::vec![(subject.clone(), obligation_id.clone(), Outcome::Deleted, summary)]
            }
            _ => Vec::new(),
        }
    }
}
