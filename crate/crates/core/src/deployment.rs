//! All services of one deployment wired together: vault, registry, gate,
//! silos, the two ledgers and the notifier.
//!
//! Every identity-sensitive operation goes through here so that it is
//! logged to both ledgers and notified exactly once.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{combine_shares, Hash32, Signer, SigningIdentity};
use crate::event::{AccessOutcome, AuditEvent};
use crate::gate::{AccessGate, AccessRequest, AccessTicket, Denial, OpenError, SubmitError, TicketError, TICKET_TTL, FRESHNESS_WINDOW};
use crate::ids::{MasterId, Operation, Scope, Timestamp, VirtualId};
use crate::ledger::LedgerPair;
use crate::notifier::{Notifier, Outcome};
use crate::registry::{
    Authorization, Basis, ConsentRecord, Decision, DeletionObligation, DeletionProof, ProgramManifest, Registry,
    RegistryError,
};
use crate::silo::{decrypt_record, Silo, SiloError, SiloSchema};
use crate::vault::{AliasGrant, IdentityVault, VaultError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeployError {
    #[error(transparent)]
    Vault(#[from] VaultError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Silo(#[from] SiloError),
    #[error("silo for domain {0} already exists")]
    DuplicateSilo(String),
    #[error("no silo for domain {0}")]
    NoSilo(String),
}

/// Restorable state of a deployment, minus the RNG.
pub struct DeploymentParts {
    pub regulator: Signer,
    pub controller: Signer,
    pub vault: IdentityVault,
    pub registry: Registry,
    pub gate: AccessGate,
    pub silos: BTreeMap<String, Silo>,
    pub ledgers: LedgerPair,
    pub notifier: Notifier,
}

pub struct Deployment<R> {
    rng: R,
    regulator: Signer,
    controller: Signer,
    identities: BTreeMap<String, SigningIdentity>,
    vault: IdentityVault,
    registry: Registry,
    gate: AccessGate,
    silos: BTreeMap<String, Silo>,
    ledgers: LedgerPair,
    notifier: Notifier,
}

impl<R: RngCore + CryptoRng> Deployment<R> {
    pub fn new(mut rng: R, regulator: Signer, controller: Signer) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let parts = DeploymentParts {
            vault: IdentityVault::new(secret),
            registry: Registry::new(regulator.clone()),
            gate: AccessGate::new(),
            silos: BTreeMap::new(),
            ledgers: LedgerPair::new(regulator.clone(), controller.clone()),
            notifier: Notifier::new(),
            regulator,
            controller,
        };
        Self::from_parts(rng, parts)
    }

    pub fn from_parts(rng: R, parts: DeploymentParts) -> Self {
        let mut identities = BTreeMap::new();
        for s in [&parts.regulator, &parts.controller] {
            identities.insert(s.key_id().to_string(), s.identity().clone());
        }
        Deployment {
            rng,
            regulator: parts.regulator,
            controller: parts.controller,
            identities,
            vault: parts.vault,
            registry: parts.registry,
            gate: parts.gate,
            silos: parts.silos,
            ledgers: parts.ledgers,
            notifier: parts.notifier,
        }
    }

    pub fn into_parts(self) -> (R, DeploymentParts) {
        let parts = DeploymentParts {
            regulator: self.regulator,
            controller: self.controller,
            vault: self.vault,
            registry: self.registry,
            gate: self.gate,
            silos: self.silos,
            ledgers: self.ledgers,
            notifier: self.notifier,
        };
        (self.rng, parts)
    }

    /// Adds a further key allowed to sign gate requests.
    pub fn register_identity(&mut self, identity: SigningIdentity) {
        self.identities.insert(identity.key_id.clone(), identity);
    }

    pub fn regulator_identity(&self) -> &SigningIdentity {
        self.regulator.identity()
    }

    pub fn controller_identity(&self) -> &SigningIdentity {
        self.controller.identity()
    }

    pub fn controller_signer(&self) -> &Signer {
        &self.controller
    }

    pub fn vault(&self) -> &IdentityVault {
        &self.vault
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn gate(&self) -> &AccessGate {
        &self.gate
    }

    pub fn silo(&self, domain: &str) -> Option<&Silo> {
        self.silos.get(domain)
    }

    pub fn silos(&self) -> impl Iterator<Item = &Silo> {
        self.silos.values()
    }

    pub fn ledgers(&self) -> &LedgerPair {
        &self.ledgers
    }

    pub fn notifier(&self) -> &Notifier {
        &self.notifier
    }

    pub fn notifier_mut(&mut self) -> &mut Notifier {
        &mut self.notifier
    }

    pub fn rng(&mut self) -> &mut R {
        &mut self.rng
    }

    fn record_event(&mut self, event: &AuditEvent, now: Timestamp) {
        self.ledgers.record(event.encode().as_bytes(), now);
        for (subject, request_id, outcome, summary) in event.notifications() {
            // A replayed request id is logged again but its subjects were
            // already told about it.
            let _ = self.notifier.enqueue(&subject, &request_id, outcome, summary, now);
        }
    }

    // identity vault

    pub fn register_domain(&mut self, domain: &str) -> Result<(), DeployError> {
        Ok(self.vault.register_domain(domain)?)
    }

    pub fn register_master(&mut self, attributes: BTreeMap<String, String>, now: Timestamp) -> Result<MasterId, DeployError> {
        Ok(self.vault.register_master(attributes, now, &mut self.rng)?)
    }

    pub fn derive_vid(&mut self, master: &MasterId, domain: &str) -> Result<VirtualId, DeployError> {
        Ok(self.vault.derive_vid(master, domain)?)
    }

    pub fn issue_alias(&mut self, master: &MasterId, ttl: u64, now: Timestamp) -> Result<AliasGrant, DeployError> {
        Ok(self.vault.issue_alias(master, ttl, now, &mut self.rng)?)
    }

    /// Routes a call to an alias number; logged, no ticket needed.
    pub fn route(&mut self, alias: &str, now: Timestamp) -> Result<String, DeployError> {
        let routed = self.vault.route(alias, now).map(String::from);
        let result = match &routed {
            Ok(_) => "ok".into(),
            Err(e) => vault_error_kind(e),
        };
        self.record_event(&AuditEvent::AliasRoute { alias: alias.into(), result }, now);
        Ok(routed?)
    }

    pub fn resolve(&mut self, vid: &VirtualId, ticket: Option<&AccessTicket>, now: Timestamp) -> Result<MasterId, DeployError> {
        let result = self.vault.resolve(vid, ticket, self.regulator.identity(), now);
        self.record_vault_event(Operation::Resolve, vid, "", ticket, result.as_ref().err(), now);
        Ok(result?)
    }

    pub fn link(
        &mut self,
        vid: &VirtualId,
        target_domain: &str,
        ticket: Option<&AccessTicket>,
        now: Timestamp,
    ) -> Result<VirtualId, DeployError> {
        let result = self.vault.link(vid, target_domain, ticket, self.regulator.identity(), now);
        self.record_vault_event(Operation::Link, vid, target_domain, ticket, result.as_ref().err(), now);
        Ok(result?)
    }

    fn record_vault_event(
        &mut self,
        operation: Operation,
        subject: &VirtualId,
        target_domain: &str,
        ticket: Option<&AccessTicket>,
        error: Option<&VaultError>,
        now: Timestamp,
    ) {
        let field = |f: fn(&AccessTicket) -> &String| ticket.map(f).cloned().unwrap_or_default();
        let event = AuditEvent::Vault {
            operation,
            ticket_id: field(|t| &t.ticket_id),
            request_id: field(|t| &t.request_id),
            subject: subject.clone(),
            target_domain: target_domain.into(),
            purpose: field(|t| &t.purpose_code),
            grantee: field(|t| &t.grantee),
            result: error.map_or_else(|| "ok".into(), vault_error_kind),
        };
        self.record_event(&event, now);
    }

    // silos

    /// Registers the silo and, if needed, its vault domain.
    pub fn create_silo(&mut self, schema: SiloSchema) -> Result<(), DeployError> {
        if self.silos.contains_key(&schema.domain) {
            return Err(DeployError::DuplicateSilo(schema.domain));
        }
        let silo = Silo::register(schema)?;
        if !self.vault.has_domain(silo.domain()) {
            self.vault.register_domain(silo.domain())?;
        }
        self.silos.insert(silo.domain().into(), silo);
        Ok(())
    }

    /// Stores an encrypted record and deposits its regulator share.
    pub fn put_record(
        &mut self,
        vid: &VirtualId,
        fields: &BTreeMap<String, String>,
        now: Timestamp,
    ) -> Result<String, DeployError> {
        let silo = self.silos.get_mut(&vid.domain).ok_or_else(|| DeployError::NoSilo(vid.domain.clone()))?;
        if !self.vault.vid_exists(vid) {
            return Err(SiloError::NotFound.into());
        }
        let (record_id, share) = silo.put_record(vid, fields, now, &mut self.rng)?;
        self.gate.deposit(&record_id, vid, share);
        Ok(record_id)
    }

    // registry

    pub fn register_purpose(&mut self, code: &str, description: &str) -> Result<(), DeployError> {
        Ok(self.registry.register_purpose(code, description)?)
    }

    pub fn sign_program(
        &mut self,
        program_id: &str,
        artifact: &[u8],
        purpose: &str,
        allowed_scope: Scope,
    ) -> Result<ProgramManifest, DeployError> {
        Ok(self.registry.sign_program(program_id, artifact, purpose, allowed_scope)?)
    }

    pub fn verify_program_runtime(&self, program_id: &str, content_digest: &Hash32) -> Result<bool, DeployError> {
        Ok(self.registry.verify_program_runtime(program_id, content_digest)?)
    }

    pub fn grant(
        &mut self,
        grantee_key_id: &str,
        scope: Scope,
        purpose: &str,
        basis: Basis,
        valid_from: Timestamp,
        valid_until: Timestamp,
    ) -> Result<Authorization, DeployError> {
        Ok(self.registry.grant(grantee_key_id, scope, purpose, basis, valid_from, valid_until)?)
    }

    /// Extends an authorization to a new purpose and tells the affected
    /// subjects: consenters of the original purpose are asked to renew,
    /// subjects under a legal basis are informed.
    pub fn extend_purpose(&mut self, auth_id: &str, new_purpose: &str, now: Timestamp) -> Result<Authorization, DeployError> {
        let original = self.registry.auth(auth_id).cloned().ok_or(RegistryError::NotFound)?;
        let extended = self.registry.extend_purpose(auth_id, new_purpose)?;
        let (outcome, subjects) = match original.basis {
            Basis::Consent => (Outcome::ConsentRenewalRequested, self.registry.live_consenters(&original.purpose_code)),
            Basis::Legal => {
                let subjects: alloc::collections::BTreeSet<VirtualId> = original
                    .scope
                    .domains
                    .iter()
                    .filter_map(|d| self.silos.get(d))
                    .flat_map(|s| s.records().map(|r| r.vid.clone()))
                    .collect();
                (Outcome::PurposeExtended, subjects.into_iter().collect())
            }
        };
        let event = AuditEvent::Notice { auth_id: extended.auth_id.clone(), purpose: new_purpose.into(), outcome, subjects };
        self.record_event(&event, now);
        Ok(extended)
    }

    pub fn revoke(&mut self, auth_id: &str) -> Result<Authorization, DeployError> {
        Ok(self.registry.revoke(auth_id)?)
    }

    /// `subject` may be any of the subject's identifiers; consent is kept
    /// against its consent-domain identifier.
    pub fn record_consent(&mut self, subject: &VirtualId, purpose: &str, now: Timestamp) -> Result<ConsentRecord, DeployError> {
        let consent_vid = self.vault.consent_subject(subject)?;
        Ok(self.registry.record_consent(&consent_vid, purpose, now)?)
    }

    pub fn renew_consent(&mut self, subject: &VirtualId, purpose: &str, now: Timestamp) -> Result<ConsentRecord, DeployError> {
        let consent_vid = self.vault.consent_subject(subject)?;
        Ok(self.registry.record_consent_renewal(&consent_vid, purpose, now)?)
    }

    /// Withdraws consent; raises one deletion obligation per silo holding
    /// the subject's data. Obligations are discharged by [`Self::process_deletion`].
    pub fn opt_out(
        &mut self,
        subject: &VirtualId,
        purpose: &str,
        now: Timestamp,
    ) -> Result<(ConsentRecord, Vec<DeletionObligation>), DeployError> {
        let consent_vid = self.vault.consent_subject(subject)?;
        let holdings: Vec<VirtualId> = self
            .vault
            .subject_vids(&consent_vid)
            .into_iter()
            .filter(|v| self.silos.get(&v.domain).is_some_and(|s| s.holds(v)))
            .collect();
        Ok(self.registry.opt_out(&consent_vid, purpose, &holdings, now)?)
    }

    /// Erases the target's records and the regulator's shares, files a
    /// dual-signed proof, logs it and notifies the subject.
    pub fn process_deletion(&mut self, obligation_id: &str, now: Timestamp) -> Result<DeletionProof, DeployError> {
        let obligation = self.registry.obligation(obligation_id).cloned().ok_or(RegistryError::NotFound)?;
        if self.registry.deletion_proofs().any(|p| p.obligation_id == obligation_id) {
            return Err(RegistryError::BadDeletionProof.into());
        }
        let silo = self
            .silos
            .get_mut(&obligation.target.domain)
            .ok_or_else(|| DeployError::NoSilo(obligation.target.domain.clone()))?;
        let record_ids = silo.erase_subject(&obligation.target);
        self.gate.destroy(&record_ids);
        let digest = DeletionProof::digest_of(&record_ids);
        let controller_signature =
            self.controller.sign(&DeletionProof::signing_bytes(obligation_id, &obligation.target, &digest));
        let regulator_signature = self.registry.countersign_deletion(obligation_id, &obligation.target, &digest);
        let proof = DeletionProof {
            obligation_id: obligation_id.into(),
            target: obligation.target.clone(),
            record_ids: record_ids.clone(),
            digest,
            controller_signature,
            regulator_signature,
        };
        self.registry.complete_deletion(proof.clone(), self.controller.identity())?;
        let event = AuditEvent::Deletion {
            obligation_id: obligation_id.into(),
            subject: obligation.subject_vid.clone(),
            purpose: obligation.purpose_code.clone(),
            target: obligation.target,
            record_ids,
            proof_digest: digest,
        };
        self.record_event(&event, now);
        Ok(proof)
    }

    /// Discharges every outstanding obligation; returns the proofs filed.
    pub fn process_pending_deletions(&mut self, now: Timestamp) -> Result<Vec<DeletionProof>, DeployError> {
        self.registry
            .pending_obligations()
            .iter()
            .map(|o| self.process_deletion(&o.obligation_id, now))
            .collect()
    }

    // gate

    fn malformed(&mut self, request: &AccessRequest) -> Option<String> {
        if !self.identities.contains_key(&request.requester_key_id) {
            return Some(alloc::format!("unknown requester {}", request.requester_key_id));
        }
        if request.subjects.is_empty() {
            return Some("request names no subjects".into());
        }
        for (i, s) in request.subjects.iter().enumerate() {
            if request.subjects[..i].contains(s) {
                return Some(alloc::format!("duplicate subject {s}"));
            }
            if !request.scope.domains.contains(&s.domain) {
                return Some(alloc::format!("subject {s} outside requested domains"));
            }
            if !self.vault.vid_exists(s) || s.domain == crate::vault::CONSENT_DOMAIN {
                return Some(alloc::format!("unknown subject {s}"));
            }
        }
        None
    }

    fn decide(&mut self, request: &AccessRequest, now: Timestamp) -> Result<(), Denial> {
        let identity = &self.identities[&request.requester_key_id];
        if !identity.verify(&request.signing_bytes(), &request.signature.0).unwrap_or(false) {
            return Err(Denial::Signature);
        }
        if !self.gate.admit(request, now) {
            return Err(Denial::Replay);
        }
        if request.timestamp.abs_diff(now) > FRESHNESS_WINDOW {
            return Err(Denial::Stale);
        }
        if self.registry.auth(&request.auth_id).is_some_and(|a| a.grantee_key_id != request.requester_key_id) {
            return Err(Denial::Grantee);
        }
        for subject in &request.subjects {
            let consent_vid = self.vault.consent_subject(subject).map_err(|_| Denial::Registry(crate::registry::DenyReason::Existence))?;
            let decision = self.registry.check(
                &request.auth_id,
                &request.content_digest,
                &request.scope,
                &request.purpose_code,
                &consent_vid,
                now,
            );
            if let Decision::Deny(reason) = decision {
                return Err(Denial::Registry(reason));
            }
        }
        if !self.registry.verify_program_runtime(&request.program_id, &request.content_digest).unwrap_or(false) {
            return Err(Denial::Registry(crate::registry::DenyReason::Manifest));
        }
        Ok(())
    }

    /// Verifies signature, freshness and every subject's registry check.
    /// Both outcomes are logged to both ledgers and notified per subject;
    /// only an allow releases regulator shares.
    pub fn submit(&mut self, request: &AccessRequest, now: Timestamp) -> Result<AccessTicket, SubmitError> {
        let request_digest = request.digest();
        if let Some(reason) = self.malformed(request) {
            self.record_event(&AuditEvent::Protocol { request_digest, reason: reason.clone() }, now);
            return Err(SubmitError::Protocol(reason));
        }
        let decision = self.decide(request, now);
        let mut ticket = None;
        let outcome = match decision {
            Ok(()) => {
                let t = self.issue_ticket(request, now);
                let outcome = AccessOutcome::Allowed { ticket_id: t.ticket_id.clone() };
                ticket = Some(t);
                outcome
            }
            Err(d) => AccessOutcome::Denied(d),
        };
        let event = AuditEvent::Access {
            request_id: request.request_id.clone(),
            request_digest,
            requester: request.requester_key_id.clone(),
            auth_id: request.auth_id.clone(),
            purpose: request.purpose_code.clone(),
            scope: request.scope.clone(),
            subjects: request.subjects.clone(),
            outcome,
        };
        self.record_event(&event, now);
        match (ticket, decision) {
            (Some(t), _) => Ok(t),
            (None, Err(d)) => Err(SubmitError::Denied(d)),
            (None, Ok(())) => unreachable!(),
        }
    }

    fn issue_ticket(&mut self, request: &AccessRequest, now: Timestamp) -> AccessTicket {
        let mut regulator_shares = BTreeMap::new();
        if request.scope.operation.releases_records() {
            for subject in &request.subjects {
                for d in self.gate.deposits_of(subject) {
                    regulator_shares.insert(d.record_id.clone(), d.share.clone());
                }
            }
        }
        let mut ticket = AccessTicket {
            ticket_id: self.gate.next_ticket_id(),
            request_id: request.request_id.clone(),
            grantee: request.requester_key_id.clone(),
            purpose_code: request.purpose_code.clone(),
            granted_scope: request.scope.clone(),
            subjects: request.subjects.clone(),
            regulator_shares,
            issued_at: now,
            expires_at: now + TICKET_TTL,
            signature: crate::crypto::Signature([0; 64]),
        };
        ticket.signature = self.regulator.sign(&ticket.signing_bytes());
        ticket
    }

    /// Decrypts one record with the controller's share and the ticket's
    /// regulator share. Returns only fields of granted classes. Every
    /// attempt is logged.
    pub fn open_record(
        &mut self,
        ticket: &AccessTicket,
        record_id: &str,
        controller_share: &crate::crypto::KeyShare,
        now: Timestamp,
    ) -> Result<BTreeMap<String, String>, OpenError> {
        let result = self.try_open(ticket, record_id, controller_share, now);
        let event = AuditEvent::Open {
            ticket_id: ticket.ticket_id.clone(),
            request_id: ticket.request_id.clone(),
            record_id: record_id.into(),
            result: result.as_ref().map_or_else(|e| e.as_str().into(), |_| "released".into()),
        };
        self.record_event(&event, now);
        result
    }

    fn try_open(
        &mut self,
        ticket: &AccessTicket,
        record_id: &str,
        controller_share: &crate::crypto::KeyShare,
        now: Timestamp,
    ) -> Result<BTreeMap<String, String>, OpenError> {
        ticket.validate(self.regulator.identity(), now).map_err(|e| match e {
            TicketError::Forged => OpenError::InvalidTicket,
            TicketError::Expired => OpenError::TicketExpired,
        })?;
        let regulator_share = ticket.regulator_shares.get(record_id).ok_or(OpenError::ScopeViolation)?;
        if self.gate.is_consumed(&ticket.ticket_id, record_id) {
            return Err(OpenError::TicketConsumed);
        }
        let deposit = self.gate.deposit_for(record_id).ok_or(OpenError::NotFound)?;
        let silo = self.silos.get(&deposit.vid.domain).ok_or(OpenError::NotFound)?;
        let ciphertext = silo.fetch_ciphertext(record_id).map_err(|_| OpenError::NotFound)?;
        let key = combine_shares(controller_share, regulator_share).map_err(|_| OpenError::DecryptFailure)?;
        let fields = decrypt_record(&key, record_id, &deposit.vid, ciphertext).map_err(|_| OpenError::DecryptFailure)?;
        let granted = &ticket.granted_scope.fields;
        let released = fields
            .into_iter()
            .filter(|(name, _)| silo.class_of(name).is_some_and(|c| granted.contains(&c)))
            .collect();
        self.gate.consume(&ticket.ticket_id, record_id);
        Ok(released)
    }
}

fn vault_error_kind(e: &VaultError) -> String {
    match e {
        VaultError::Unauthorized(_) => "Unauthorized".into(),
        VaultError::Expired => "Expired".into(),
        VaultError::NotFound => "NotFound".into(),
        other => alloc::format!("{other}"),
    }
}
