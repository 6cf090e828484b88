use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

use pdgate_core::crypto::{sha256, Custodian, KeyShare, Role, Signer};
use pdgate_core::event::AuditEvent;
use pdgate_core::gate::{AccessRequest, AccessTicket, Denial, OpenError, RequestDraft, SubmitError};
use pdgate_core::ledger::{ChainStatus, CrossStatus};
use pdgate_core::notifier::Outcome;
use pdgate_core::registry::{Basis, DenyReason};
use pdgate_core::silo::{SiloError, SiloSchema};
use pdgate_core::vault::{Unauthorized, VaultError};
use pdgate_core::{DeployError, Deployment, FieldClass, MasterId, Scope, VirtualId};

type Dep = Deployment<ChaCha20Rng>;

const ARTIFACT: &[u8] = b"SELECT income FROM tax";

struct World {
    dep: Dep,
    masters: Vec<MasterId>,
    tax: Vec<VirtualId>,
    auth_id: String,
    nonce: u8,
}

fn scope(s: &str) -> Scope {
    s.parse().unwrap()
}

fn world(basis: Basis) -> World {
    let regulator = Signer::from_seed("regulator", Role::Regulator, [1; 32]);
    let controller = Signer::from_seed("controller", Role::Controller, [2; 32]);
    let mut dep = Deployment::new(ChaCha20Rng::seed_from_u64(7), regulator, controller);
    dep.create_silo(SiloSchema::new("tax", [("income", FieldClass::Financial), ("year", FieldClass::Other)]))
        .unwrap();
    dep.create_silo(SiloSchema::new("health", [("diagnosis", FieldClass::Health)])).unwrap();
    let mut masters = Vec::new();
    let mut tax = Vec::new();
    for i in 0..3 {
        let attrs = BTreeMap::from([("name".to_string(), format!("Person {i}"))]);
        let m = dep.register_master(attrs, 0).unwrap();
        let v = dep.derive_vid(&m, "tax").unwrap();
        let fields = BTreeMap::from([("income".to_string(), format!("{}", 1000 * (i + 1))), ("year".into(), "2024".into())]);
        dep.put_record(&v, &fields, 0).unwrap();
        masters.push(m);
        tax.push(v);
    }
    dep.register_purpose("TAX", "tax assessment").unwrap();
    dep.sign_program("tax-report", ARTIFACT, "TAX", scope("read/tax/financial,other")).unwrap();
    let auth = dep.grant("controller", scope("read/tax/financial,other"), "TAX", basis, 0, 10_000).unwrap();
    World { dep, masters, tax, auth_id: auth.auth_id, nonce: 0 }
}

impl World {
    fn request(&mut self, id: &str, subjects: &[VirtualId], now: u64) -> AccessRequest {
        self.request_with(id, subjects, "read/tax/financial", "TAX", ARTIFACT, now)
    }

    fn request_with(&mut self, id: &str, subjects: &[VirtualId], s: &str, purpose: &str, artifact: &[u8], now: u64) -> AccessRequest {
        self.nonce += 1;
        let draft = RequestDraft {
            request_id: id.into(),
            program_id: "tax-report".into(),
            content_digest: sha256(artifact),
            auth_id: self.auth_id.clone(),
            scope: scope(s),
            subjects: subjects.to_vec(),
            purpose_code: purpose.into(),
        };
        AccessRequest::sign(draft, self.dep.controller_signer(), [self.nonce; 16], now)
    }

    fn controller_share(&self, record_id: &str) -> KeyShare {
        self.dep.silo("tax").unwrap().controller_share(record_id).unwrap().clone()
    }

    fn events(&self) -> Vec<AuditEvent> {
        self.dep
            .ledgers()
            .regulator
            .ledger()
            .entries()
            .iter()
            .map(|e| AuditEvent::decode(&e.payload).unwrap())
            .collect()
    }

    fn assert_ledgers_consistent(&self) {
        let l = self.dep.ledgers();
        assert_eq!(l.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(l.controller.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(l.cross_verify(), CrossStatus::Ok);
    }
}

#[test]
fn allow_issues_ticket_and_round_trips_plaintext() {
    let mut w = world(Basis::Legal);
    let subjects = w.tax[..2].to_vec();
    let req = w.request("req-1", &subjects, 100);
    let ticket = w.dep.submit(&req, 100).unwrap();
    // One share per stored record of the named subjects.
    assert_eq!(ticket.regulator_shares.len(), 2);
    assert_eq!(ticket.expires_at, 160);
    for (i, rid) in ticket.regulator_shares.keys().enumerate() {
        let share = w.controller_share(rid);
        let fields = w.dep.open_record(&ticket, rid, &share, 101 + i as u64).unwrap();
        // Only granted field classes come back.
        assert_eq!(fields.keys().collect::<Vec<_>>(), ["income"]);
    }
    assert_eq!(w.dep.gate().releases(), 2);
    for s in &subjects {
        let mail = w.dep.notifier().mailbox(s);
        assert_eq!(mail.len(), 1);
        assert_eq!((mail[0].outcome, mail[0].request_id.as_str()), (Outcome::Allowed, "req-1"));
        assert!(mail[0].summary.contains("purpose=TAX"));
    }
    assert!(w.dep.notifier().mailbox(&w.tax[2]).is_empty());
    w.assert_ledgers_consistent();
}

#[test]
fn open_failures_are_typed_and_logged() {
    let mut w = world(Basis::Legal);
    let first = w.tax[0].clone();
    let req = w.request("req-1", std::slice::from_ref(&first), 100);
    let ticket = w.dep.submit(&req, 100).unwrap();
    let rid = ticket.regulator_shares.keys().next().unwrap().clone();
    let share = w.controller_share(&rid);

    let zero = KeyShare { share: [0; 32], holder: Custodian::Controller };
    assert_eq!(w.dep.open_record(&ticket, &rid, &zero, 101), Err(OpenError::DecryptFailure));
    let other = w.dep.silo("tax").unwrap().records_for(&w.tax[1])[0].clone();
    assert_eq!(w.dep.open_record(&ticket, &other, &share, 101), Err(OpenError::ScopeViolation));
    assert_eq!(w.dep.open_record(&ticket, &rid, &share, 160), Err(OpenError::TicketExpired));
    assert!(w.dep.open_record(&ticket, &rid, &share, 102).is_ok());
    assert_eq!(w.dep.open_record(&ticket, &rid, &share, 103), Err(OpenError::TicketConsumed));

    let mut forged = ticket.clone();
    forged.expires_at += 1_000;
    assert_eq!(w.dep.open_record(&forged, &rid, &share, 104), Err(OpenError::InvalidTicket));

    let results: Vec<String> = w
        .events()
        .into_iter()
        .filter_map(|e| match e {
            AuditEvent::Open { result, .. } => Some(result),
            _ => None,
        })
        .collect();
    assert_eq!(results, ["DecryptFailure", "ScopeViolation", "TicketExpired", "released", "TicketConsumed", "InvalidTicket"]);
    assert_eq!(w.dep.gate().releases(), 1);
    w.assert_ledgers_consistent();
}

#[test]
fn denials_are_logged_and_notified() {
    let mut w = world(Basis::Legal);
    let s = w.tax[..1].to_vec();

    let expired = w.request("late", &s, 10_000);
    assert_eq!(w.dep.submit(&expired, 10_000), Err(SubmitError::Denied(Denial::Registry(DenyReason::Window))));

    let tampered = w.request_with("tamper", &s, "read/tax/financial", "TAX", b"SELECT * FROM tax", 100);
    assert_eq!(w.dep.submit(&tampered, 100), Err(SubmitError::Denied(Denial::Registry(DenyReason::Manifest))));

    let wide = w.request_with("wide", &s, "read/tax/financial,health", "TAX", ARTIFACT, 100);
    assert_eq!(w.dep.submit(&wide, 100), Err(SubmitError::Denied(Denial::Registry(DenyReason::Scope))));

    let stale = w.request("stale", &s, 100);
    assert_eq!(w.dep.submit(&stale, 401), Err(SubmitError::Denied(Denial::Stale)));

    let ok = w.request("ok", &s, 100);
    w.dep.submit(&ok, 100).unwrap();
    assert_eq!(w.dep.submit(&ok, 101), Err(SubmitError::Denied(Denial::Replay)));

    let mut bad_sig = w.request("badsig", &s, 100);
    bad_sig.purpose_code = "OTHER".into();
    assert_eq!(w.dep.submit(&bad_sig, 100), Err(SubmitError::Denied(Denial::Signature)));

    let mail = w.dep.notifier().mailbox(&s[0]);
    let outcomes: Vec<(&str, Outcome)> = mail.iter().map(|n| (n.request_id.as_str(), n.outcome)).collect();
    assert_eq!(
        outcomes,
        [
            ("late", Outcome::Denied),
            ("tamper", Outcome::Denied),
            ("wide", Outcome::Denied),
            ("stale", Outcome::Denied),
            ("ok", Outcome::Allowed),
            ("badsig", Outcome::Denied),
        ]
    );
    assert!(mail[0].summary.contains("Deny(Window)"));
    // Seven submissions, seven access entries per ledger.
    let access = w.events().iter().filter(|e| e.is_submission()).count();
    assert_eq!(access, 7);
    assert_eq!(w.dep.ledgers().controller.ledger().len(), w.dep.ledgers().regulator.ledger().len());
    w.assert_ledgers_consistent();
}

#[test]
fn malformed_requests_are_protocol_errors_without_notification() {
    let mut w = world(Basis::Legal);
    let empty = w.request("empty", &[], 100);
    assert!(matches!(w.dep.submit(&empty, 100), Err(SubmitError::Protocol(_))));
    let unknown = w.request("unknown", &[VirtualId::new("tax", 12345)], 100);
    assert!(matches!(w.dep.submit(&unknown, 100), Err(SubmitError::Protocol(_))));
    let outsider = Signer::from_seed("mallory", Role::Controller, [9; 32]);
    let draft = RequestDraft {
        request_id: "x".into(),
        program_id: "tax-report".into(),
        content_digest: sha256(ARTIFACT),
        auth_id: w.auth_id.clone(),
        scope: scope("read/tax/financial"),
        subjects: w.tax.clone(),
        purpose_code: "TAX".into(),
    };
    let req = AccessRequest::sign(draft, &outsider, [0; 16], 100);
    assert!(matches!(w.dep.submit(&req, 100), Err(SubmitError::Protocol(_))));
    assert!(w.dep.notifier().is_empty());
    assert_eq!(w.events().iter().filter(|e| e.kind() == "protocol").count(), 3);
}

#[test]
fn wrong_grantee_is_denied() {
    let mut w = world(Basis::Legal);
    let other = Signer::from_seed("auditor", Role::Controller, [4; 32]);
    w.dep.register_identity(other.identity().clone());
    let draft = RequestDraft {
        request_id: "r".into(),
        program_id: "tax-report".into(),
        content_digest: sha256(ARTIFACT),
        auth_id: w.auth_id.clone(),
        scope: scope("read/tax/financial"),
        subjects: w.tax[..1].to_vec(),
        purpose_code: "TAX".into(),
    };
    let req = AccessRequest::sign(draft, &other, [0; 16], 100);
    assert_eq!(w.dep.submit(&req, 100), Err(SubmitError::Denied(Denial::Grantee)));
}

#[test]
fn consent_basis_lifecycle_with_deletion() {
    let mut w = world(Basis::Consent);
    let (a, b) = (w.tax[0].clone(), w.tax[1].clone());
    let req = w.request("before", std::slice::from_ref(&a), 100);
    assert_eq!(w.dep.submit(&req, 100), Err(SubmitError::Denied(Denial::Registry(DenyReason::Consent))));

    w.dep.record_consent(&a, "TAX", 100).unwrap();
    w.dep.record_consent(&b, "TAX", 100).unwrap();
    let req = w.request("after", &[a.clone(), b.clone()], 101);
    let ticket = w.dep.submit(&req, 101).unwrap();
    assert_eq!(ticket.regulator_shares.len(), 2);

    // Data also held in a second silo: two obligations.
    let h = w.dep.derive_vid(&w.masters[0], "health").unwrap();
    w.dep.put_record(&h, &BTreeMap::from([("diagnosis".into(), "flu".into())]), 101).unwrap();
    let a_records = w.dep.silo("tax").unwrap().records_for(&a);
    let a_ciphertext = w.dep.silo("tax").unwrap().record(&a_records[0]).unwrap().ciphertext.clone();

    let (record, obligations) = w.dep.opt_out(&a, "TAX", 102).unwrap();
    assert_eq!(record.opted_out_at, Some(102));
    assert_eq!(obligations.len(), 2);
    let mut targets: Vec<_> = obligations.iter().map(|o| o.target.clone()).collect();
    targets.sort();
    let mut expected = vec![a.clone(), h.clone()];
    expected.sort();
    assert_eq!(targets, expected);

    let req = w.request("optedout", std::slice::from_ref(&a), 103);
    assert_eq!(w.dep.submit(&req, 103), Err(SubmitError::Denied(Denial::Registry(DenyReason::Consent))));

    let proofs = w.dep.process_pending_deletions(104).unwrap();
    assert_eq!(proofs.len(), 2);
    for p in &proofs {
        assert!(p.verify(w.dep.controller_identity(), w.dep.regulator_identity()));
    }
    assert!(w.dep.silo("tax").unwrap().records_for(&a).is_empty());
    assert!(w.dep.silo("health").unwrap().records_for(&h).is_empty());
    assert_eq!(w.dep.gate().deposits_of(&a).count(), 0);
    assert!(!w.dep.silo("tax").unwrap().records().any(|r| r.ciphertext == a_ciphertext));

    // The earlier ticket no longer opens the deleted record.
    let share = KeyShare { share: [0; 32], holder: Custodian::Controller };
    assert_eq!(w.dep.open_record(&ticket, &a_records[0], &share, 105), Err(OpenError::NotFound));

    // Subject is told about the deletions through its consent identifier.
    let consent_vid = w.dep.registry().deletion_proofs().count();
    assert_eq!(consent_vid, 2);
    let deleted = w.dep.notifier().all().filter(|n| n.outcome == Outcome::Deleted).count();
    assert_eq!(deleted, 2);

    // Re-consent restores access.
    w.dep.record_consent(&a, "TAX", 106).unwrap();
    let req = w.request("again", std::slice::from_ref(&a), 106);
    let t = w.dep.submit(&req, 106).unwrap();
    assert!(t.regulator_shares.is_empty());
    w.assert_ledgers_consistent();
}

#[test]
fn purpose_extension_semantics() {
    let mut w = world(Basis::Consent);
    let (a, b) = (w.tax[0].clone(), w.tax[1].clone());
    w.dep.register_purpose("AUDIT", "audit").unwrap();
    w.dep.sign_program("tax-audit", b"audit program", "AUDIT", scope("read/tax/financial")).unwrap();
    w.dep.record_consent(&a, "TAX", 1).unwrap();
    w.dep.record_consent(&b, "TAX", 1).unwrap();
    let ext = w.dep.extend_purpose(&w.auth_id.clone(), "AUDIT", 2).unwrap();
    let renewals = w.dep.notifier().all().filter(|n| n.outcome == Outcome::ConsentRenewalRequested).count();
    assert_eq!(renewals, 2);

    let make = |w: &mut World, id: &str, s: &VirtualId, now: u64| {
        w.nonce += 1;
        let draft = RequestDraft {
            request_id: id.into(),
            program_id: "tax-audit".into(),
            content_digest: sha256(b"audit program"),
            auth_id: ext.auth_id.clone(),
            scope: scope("read/tax/financial"),
            subjects: vec![s.clone()],
            purpose_code: "AUDIT".into(),
        };
        AccessRequest::sign(draft, w.dep.controller_signer(), [w.nonce; 16], now)
    };
    let r = make(&mut w, "pre-renewal", &a, 3);
    assert_eq!(w.dep.submit(&r, 3), Err(SubmitError::Denied(Denial::Registry(DenyReason::Consent))));
    w.dep.renew_consent(&a, "AUDIT", 4).unwrap();
    let r = make(&mut w, "renewed", &a, 5);
    assert!(w.dep.submit(&r, 5).is_ok());
    let r = make(&mut w, "not-renewed", &b, 6);
    assert_eq!(w.dep.submit(&r, 6), Err(SubmitError::Denied(Denial::Registry(DenyReason::Consent))));

    let mut legal = world(Basis::Legal);
    legal.dep.register_purpose("AUDIT", "audit").unwrap();
    let ext = legal.dep.extend_purpose(&legal.auth_id.clone(), "AUDIT", 2).unwrap();
    assert_eq!(ext.status, pdgate_core::registry::AuthStatus::Active);
    let informed = legal.dep.notifier().all().filter(|n| n.outcome == Outcome::PurposeExtended).count();
    assert_eq!(informed, 3);
}

#[test]
fn resolve_and_link_require_tickets_and_are_logged() {
    let mut w = world(Basis::Legal);
    w.dep.register_purpose("LINK", "cross-domain study").unwrap();
    w.dep.sign_program("linker", b"linker", "LINK", scope("link/health,tax/")).unwrap();
    w.dep.sign_program("resolver", b"resolver", "LINK", scope("resolve/tax/")).unwrap();
    let link_auth = w.dep.grant("controller", scope("link/health,tax/"), "LINK", Basis::Legal, 0, 1_000).unwrap();
    let resolve_auth = w.dep.grant("controller", scope("resolve/tax/"), "LINK", Basis::Legal, 0, 1_000).unwrap();
    let h = w.dep.derive_vid(&w.masters[0], "health").unwrap();

    assert_eq!(
        w.dep.link(&h, "tax", None, 10),
        Err(DeployError::Vault(VaultError::Unauthorized(Unauthorized::NoTicket)))
    );
    let ticket_for = |w: &mut World, id: &str, program: &str, artifact: &[u8], auth: &str, s: &str, subj: &VirtualId| -> AccessTicket {
        w.nonce += 1;
        let draft = RequestDraft {
            request_id: id.into(),
            program_id: program.into(),
            content_digest: sha256(artifact),
            auth_id: auth.into(),
            scope: scope(s),
            subjects: vec![subj.clone()],
            purpose_code: "LINK".into(),
        };
        let req = AccessRequest::sign(draft, w.dep.controller_signer(), [w.nonce; 16], 10);
        w.dep.submit(&req, 10).unwrap()
    };
    let lt = ticket_for(&mut w, "l1", "linker", b"linker", &link_auth.auth_id, "link/health,tax/", &h);
    assert!(lt.regulator_shares.is_empty());
    assert_eq!(w.dep.link(&h, "tax", Some(&lt), 11).unwrap(), w.tax[0]);
    assert_eq!(
        w.dep.link(&h, "tax", Some(&lt), 12),
        Err(DeployError::Vault(VaultError::Unauthorized(Unauthorized::Consumed)))
    );
    assert!(matches!(w.dep.resolve(&w.tax[0].clone(), Some(&lt), 12), Err(DeployError::Vault(VaultError::Unauthorized(_)))));

    let t0 = w.tax[0].clone();
    let rt = ticket_for(&mut w, "r1", "resolver", b"resolver", &resolve_auth.auth_id, "resolve/tax/", &t0);
    assert_eq!(w.dep.resolve(&w.tax[0].clone(), Some(&rt), 13).unwrap(), w.masters[0]);

    // Gate allow + successful vault operation, each notified once.
    assert_eq!(w.dep.notifier().mailbox(&h).len(), 2);
    let vault_events: Vec<String> = w
        .events()
        .into_iter()
        .filter_map(|e| match e {
            AuditEvent::Vault { result, .. } => Some(result),
            _ => None,
        })
        .collect();
    assert_eq!(vault_events, ["Unauthorized", "ok", "Unauthorized", "Unauthorized", "ok"]);
    w.assert_ledgers_consistent();
}

#[test]
fn alias_routing_is_logged() {
    let regulator = Signer::from_seed("regulator", Role::Regulator, [1; 32]);
    let controller = Signer::from_seed("controller", Role::Controller, [2; 32]);
    let mut dep = Deployment::new(ChaCha20Rng::seed_from_u64(1), regulator, controller);
    let m = dep.register_master(BTreeMap::from([("real_phone".into(), "+15550001111".into())]), 0).unwrap();
    let g = dep.issue_alias(&m, 10, 100).unwrap();
    assert!(g.alias_number.starts_with("99"));
    assert_eq!(dep.route(&g.alias_number, 100).unwrap(), "+15550001111");
    assert_eq!(dep.route(&g.alias_number, 110), Err(DeployError::Vault(VaultError::Expired)));
    assert_eq!(dep.ledgers().regulator.ledger().len(), 2);
    // The log names the alias only.
    for e in dep.ledgers().regulator.ledger().entries() {
        assert!(!e.payload.windows(12).any(|w| w == b"+15550001111"));
    }
}

#[test]
fn put_record_preconditions() {
    let mut w = world(Basis::Legal);
    let fields = BTreeMap::from([("income".to_string(), "1".to_string())]);
    assert_eq!(w.dep.put_record(&VirtualId::new("tax", 1), &fields, 0), Err(DeployError::Silo(SiloError::NotFound)));
    let bad = BTreeMap::from([("name".to_string(), "x".to_string())]);
    assert!(matches!(w.dep.put_record(&w.tax[0].clone(), &bad, 0), Err(DeployError::Silo(SiloError::SchemaError(_)))));
    assert!(matches!(
        w.dep.create_silo(SiloSchema::new("crm", [("address", FieldClass::Other)])),
        Err(DeployError::Silo(SiloError::WeakIdentifierRejected(_)))
    ));
    assert!(w.events().is_empty());
}
