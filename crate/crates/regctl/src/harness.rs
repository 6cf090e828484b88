//! Scenario runner: executes steps against a fresh deployment, mounts the
//! attack catalogue and checks global invariants afterwards.
//!
//! Time is logical: every step advances the clock by one tick, `ADVANCE`
//! adds more. All randomness comes from the seed, so a (scenario, seed)
//! pair always produces the same report.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::sync::Mutex;
use std::thread;

use pdgate_core::crypto::{combine_shares, sha256, to_hex, Custodian, KeyShare, Role, Signature, Signer};
use pdgate_core::event::{AccessOutcome, AuditEvent};
use pdgate_core::gate::{AccessRequest, AccessTicket, Denial, OpenError, RequestDraft, SubmitError};
use pdgate_core::ledger::{cross_verify, ChainStatus, CrossStatus, Ledger, LedgerWriter, LogEntry};
use pdgate_core::notifier::Outcome;
use pdgate_core::registry::{Basis, Decision, DeletionProof, DenyReason};
use pdgate_core::silo::{decrypt_record, SiloError, SiloSchema};
use pdgate_core::{DeployError, FieldClass, MasterId, Scope, Timestamp, VirtualId};
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

use crate::linkage::{self, LinkageError, LinkageReport};
use crate::scenario::{AttackKind, Keyword, Scenario, Step};
use crate::store::{render_ledger, state_files, Dep, CONTROLLER_KEY_ID, REGULATOR_KEY_ID, VAULT_FILE};
use crate::verify::verify_logs;

/// Attribute values shorter than this are too common to scan for.
pub const SENTINEL_MIN_LEN: usize = 6;
/// Accuracy bound for the silo-only linkage adversary: five times the
/// random baseline, and never below 0.05.
pub fn linkage_threshold(subjects: usize) -> f64 {
    (5.0 / subjects.max(1) as f64).max(0.05)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackFinding {
    pub line: usize,
    pub kind: AttackKind,
    pub caught: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub name: String,
    pub seed: u64,
    pub steps: Vec<String>,
    pub attacks: Vec<AttackFinding>,
    pub invariants: Vec<InvariantCheck>,
    pub linkage: Option<Result<LinkageReport, LinkageError>>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.invariants.iter().all(|i| i.passed)
    }

    pub fn invariant(&self, name: &str) -> Option<&InvariantCheck> {
        self.invariants.iter().find(|i| i.name == name)
    }

    /// Plain text with a fixed section order: scenario, steps, attacks,
    /// invariants, summary.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "== scenario ==");
        let _ = writeln!(out, "name={}", self.name);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "steps={}", self.steps.len());
        let _ = writeln!(out, "== steps ==");
        for s in &self.steps {
            let _ = writeln!(out, "{s}");
        }
        let _ = writeln!(out, "== attacks ==");
        for a in &self.attacks {
            let verdict = if a.caught { "caught" } else { "MISSED" };
            let _ = writeln!(out, "line={} kind={} result={verdict} {}", a.line, a.kind, a.detail);
        }
        let _ = writeln!(out, "== invariants ==");
        for i in &self.invariants {
            let verdict = if i.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{}={verdict} {}", i.name, i.detail);
        }
        let failed = self.invariants.iter().filter(|i| !i.passed).count();
        let caught = self.attacks.iter().filter(|a| a.caught).count();
        let _ = writeln!(out, "== summary ==");
        let _ = writeln!(out, "invariants={} failed={failed}", self.invariants.len());
        let _ = writeln!(out, "attacks={} caught={caught}", self.attacks.len());
        let _ = writeln!(out, "result={}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// Accuracy of the silo-only adversary in the run's CrossSiloLink attack.
pub fn adversary_link_accuracy(report: &Report) -> Result<f64, LinkageError> {
    match &report.linkage {
        Some(Ok(r)) => Ok(r.accuracy),
        Some(Err(e)) => Err(e.clone()),
        None => Err(LinkageError::InsufficientPopulation { subjects: 0, domains: 0 }),
    }
}

/// A finished run with the deployment it left behind, for callers that want
/// to check more than the report does.
pub struct Execution {
    pub report: Report,
    pub deployment: Dep,
    pub regulator: Signer,
    pub controller: Signer,
    /// Gate submissions the harness made, malformed ones included.
    pub submits: u64,
    /// Records whose plaintext came back through the gate.
    pub plaintexts: u64,
    pub sentinels: BTreeSet<String>,
    /// Everything sent between services: signed requests and tickets.
    pub wire: Vec<Vec<u8>>,
}

pub fn run(scenario: &Scenario, seed: Option<u64>) -> Report {
    execute(scenario, seed).report
}

pub fn execute(scenario: &Scenario, seed: Option<u64>) -> Execution {
    let seed = seed.unwrap_or(scenario.seed);
    let mut run = Run::new(seed);
    for (i, step) in scenario.steps.iter().enumerate() {
        run.now += 1;
        let outcome = run.step(step);
        run.steps.push(format!("{:04} line={} {} -> {outcome}", i + 1, step.line, describe(step)));
    }
    let invariants = run.invariants();
    let report = Report {
        name: scenario.name.clone(),
        seed,
        steps: std::mem::take(&mut run.steps),
        attacks: std::mem::take(&mut run.attacks),
        invariants,
        linkage: run.linkage.take(),
    };
    Execution {
        report,
        deployment: run.dep,
        regulator: run.regulator,
        controller: run.controller,
        submits: run.submits,
        plaintexts: run.plaintexts,
        sentinels: run.sentinels,
        wire: run.wire,
    }
}

/// Step echo for the report; attribute and field values stay out of it.
fn describe(step: &Step) -> String {
    match step.keyword {
        Keyword::Master => format!("MASTER id={} attributes={}", step.req("id"), step.extras().count()),
        Keyword::Put => format!("PUT master={} silo={} fields={}", step.req("master"), step.req("silo"), step.extras().count()),
        _ => step.to_string(),
    }
}

fn classify(result: &Result<AccessTicket, SubmitError>) -> String {
    match result {
        Ok(_) => "Allow".into(),
        Err(SubmitError::Denied(d)) => d.to_string(),
        Err(SubmitError::Protocol(_)) => "Protocol".into(),
    }
}

fn deploy_kind(e: &DeployError) -> String {
    match e {
        DeployError::Vault(pdgate_core::vault::VaultError::Unauthorized(_)) => "Unauthorized".into(),
        DeployError::Vault(pdgate_core::vault::VaultError::Expired) => "Expired".into(),
        DeployError::Vault(pdgate_core::vault::VaultError::NotFound) => "NotFound".into(),
        DeployError::Silo(SiloError::WeakIdentifierRejected(_)) => "WeakIdentifierRejected".into(),
        other => other.to_string(),
    }
}

struct Submitted {
    request: AccessRequest,
    ticket: Option<AccessTicket>,
}

struct Captured {
    ciphertext: Vec<u8>,
    controller: [u8; 32],
    regulator: [u8; 32],
}

struct Run {
    dep: Dep,
    regulator: Signer,
    controller: Signer,
    rng: ChaCha20Rng,
    now: Timestamp,
    masters: BTreeMap<String, MasterId>,
    holdings: BTreeMap<MasterId, BTreeSet<String>>,
    programs: BTreeMap<String, Vec<u8>>,
    grants: BTreeMap<String, String>,
    requests: BTreeMap<String, Submitted>,
    aliases: BTreeMap<String, String>,
    population: Vec<MasterId>,
    population_domains: Vec<String>,
    sentinels: BTreeSet<String>,
    captured: BTreeMap<String, Captured>,
    deleted: BTreeSet<String>,
    proofs: Vec<DeletionProof>,
    wire: Vec<Vec<u8>>,
    submits: u64,
    plaintexts: u64,
    mismatches: usize,
    steps: Vec<String>,
    attacks: Vec<AttackFinding>,
    linkage: Option<Result<LinkageReport, LinkageError>>,
    smuggles: usize,
}

type StepResult = Result<String, String>;

impl Run {
    fn new(seed: u64) -> Self {
        let mut dep_rng = ChaCha20Rng::seed_from_u64(seed);
        let regulator = Signer::generate(REGULATOR_KEY_ID, Role::Regulator, &mut dep_rng);
        let controller = Signer::generate(CONTROLLER_KEY_ID, Role::Controller, &mut dep_rng);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Run {
            dep: Dep::new(dep_rng, regulator.clone(), controller.clone()),
            regulator,
            controller,
            rng,
            now: 0,
            masters: BTreeMap::new(),
            holdings: BTreeMap::new(),
            programs: BTreeMap::new(),
            grants: BTreeMap::new(),
            requests: BTreeMap::new(),
            aliases: BTreeMap::new(),
            population: Vec::new(),
            population_domains: Vec::new(),
            sentinels: BTreeSet::new(),
            captured: BTreeMap::new(),
            deleted: BTreeSet::new(),
            proofs: Vec::new(),
            wire: Vec::new(),
            submits: 0,
            plaintexts: 0,
            mismatches: 0,
            steps: Vec::new(),
            attacks: Vec::new(),
            linkage: None,
            smuggles: 0,
        }
    }

    fn step(&mut self, step: &Step) -> String {
        let result = match step.keyword {
            Keyword::Silo => self.silo(step),
            Keyword::Master => self.master(step),
            Keyword::Put => self.put(step),
            Keyword::Purpose => {
                let code = step.req("code");
                self.dep.register_purpose(code, step.get("description").unwrap_or(code)).map(|_| "ok".into()).map_err(|e| e.to_string())
            }
            Keyword::Program => self.program(step),
            Keyword::Grant => self.grant(step),
            Keyword::Extend => self.extend(step),
            Keyword::Revoke => {
                let auth = self.auth_id(step.req("grant"));
                self.dep.revoke(&auth).map(|a| format!("status={}", a.status.as_str())).map_err(|e| e.to_string())
            }
            Keyword::Consent | Keyword::Renew | Keyword::Optout => self.consent(step),
            Keyword::Submit => self.submit_step(step),
            Keyword::Open => self.open_step(step),
            Keyword::Resolve | Keyword::Link => self.vault_op(step),
            Keyword::Alias => self.alias(step),
            Keyword::Route => {
                let number = self.aliases.get(step.req("alias")).cloned().unwrap_or_default();
                let kind = match self.dep.route(&number, self.now) {
                    Ok(_) => "ok".to_string(),
                    Err(e) => deploy_kind(&e),
                };
                Ok(format!("{kind}{}", self.expect(step, &kind)))
            }
            Keyword::Advance => {
                self.now += step.num("by").unwrap();
                Ok(format!("now={}", self.now))
            }
            Keyword::Population => self.populate(step),
            Keyword::Traffic => self.traffic(step),
            Keyword::Concurrent => self.concurrent(step),
            Keyword::Attack => {
                let finding = self.attack(step);
                let text = format!("{} {}", if finding.caught { "caught" } else { "MISSED" }, finding.detail);
                self.attacks.push(finding);
                Ok(text)
            }
        };
        match result {
            Ok(s) => s,
            Err(e) => {
                self.mismatches += 1;
                format!("error: {e}")
            }
        }
    }

    /// Compares `actual` with the step's `expect=`, if any.
    fn expect(&mut self, step: &Step, actual: &str) -> String {
        match step.get("expect") {
            Some(e) if e != actual => {
                self.mismatches += 1;
                format!(" MISMATCH expected={e}")
            }
            _ => String::new(),
        }
    }

    fn master_id(&self, handle: &str) -> Result<MasterId, String> {
        self.masters.get(handle).copied().ok_or_else(|| format!("master {handle} was not registered"))
    }

    fn auth_id(&self, handle: &str) -> String {
        // A grant that failed to register is presented under its handle,
        // which the registry does not know.
        self.grants.get(handle).cloned().unwrap_or_else(|| handle.to_string())
    }

    /// The master's identifier in `domain`, or in the first domain of
    /// `scope` where it holds data.
    fn subject_vid(&mut self, master: &MasterId, domain: Option<&str>, scope: &Scope) -> Result<VirtualId, String> {
        let domain = match domain {
            Some(d) => d.to_string(),
            None => {
                let held = self.holdings.get(master);
                scope
                    .domains
                    .iter()
                    .find(|d| held.is_some_and(|h| h.contains(*d)))
                    .or_else(|| scope.domains.iter().next())
                    .cloned()
                    .ok_or("scope has no domains")?
            }
        };
        self.dep.derive_vid(master, &domain).map_err(|e| e.to_string())
    }

    fn put_fields(&mut self, master: MasterId, domain: &str, fields: BTreeMap<String, String>) -> Result<String, String> {
        let vid = self.dep.derive_vid(&master, domain).map_err(|e| e.to_string())?;
        let record_id = self.dep.put_record(&vid, &fields, self.now).map_err(|e| e.to_string())?;
        let record = self.dep.silo(domain).and_then(|s| s.record(&record_id)).expect("record just stored");
        let deposit = self.dep.gate().deposit_for(&record_id).expect("share just deposited");
        self.captured.insert(
            record_id.clone(),
            Captured {
                ciphertext: record.ciphertext.clone(),
                controller: record.controller_share.share,
                regulator: deposit.share.share,
            },
        );
        self.holdings.entry(master).or_default().insert(domain.to_string());
        Ok(record_id)
    }

    fn silo(&mut self, step: &Step) -> StepResult {
        let fields = step
            .req("fields")
            .split(',')
            .map(|f| {
                let (name, class) = f.split_once(':').expect("validated field");
                (name.to_string(), class.parse::<FieldClass>().expect("validated class"))
            })
            .collect::<Vec<_>>();
        let mut schema = SiloSchema::new(step.req("domain"), fields);
        schema.contact_approved = step.get("contact") == Some("approved");
        self.dep.create_silo(schema).map(|_| "ok".into()).map_err(|e| e.to_string())
    }

    fn master(&mut self, step: &Step) -> StepResult {
        let attrs: BTreeMap<String, String> = step.extras().map(|(k, v)| (k.into(), v.into())).collect();
        for v in attrs.values().filter(|v| v.len() >= SENTINEL_MIN_LEN) {
            self.sentinels.insert(v.clone());
        }
        let id = self.dep.register_master(attrs, self.now).map_err(|e| e.to_string())?;
        self.masters.insert(step.req("id").into(), id);
        Ok("ok".into())
    }

    fn put(&mut self, step: &Step) -> StepResult {
        let master = self.master_id(step.req("master"))?;
        let fields = step.extras().map(|(k, v)| (k.into(), v.into())).collect();
        let record_id = self.put_fields(master, step.req("silo"), fields)?;
        Ok(format!("record={record_id}"))
    }

    fn program(&mut self, step: &Step) -> StepResult {
        let id = step.req("id");
        let artifact = step.get("artifact").map_or_else(|| format!("program {id}").into_bytes(), |a| a.as_bytes().to_vec());
        let scope: Scope = step.req("scope").parse().expect("validated scope");
        self.dep.sign_program(id, &artifact, step.req("purpose"), scope).map_err(|e| e.to_string())?;
        self.programs.insert(id.into(), artifact);
        Ok("ok".into())
    }

    fn grant(&mut self, step: &Step) -> StepResult {
        let scope: Scope = step.req("scope").parse().expect("validated scope");
        let basis: Basis = step.req("basis").parse().expect("validated basis");
        let from = step.num("from").unwrap_or(0);
        let until = step.num("until").unwrap_or(self.now + 1_000_000);
        let grantee = step.get("grantee").unwrap_or(CONTROLLER_KEY_ID);
        let auth = self.dep.grant(grantee, scope, step.req("purpose"), basis, from, until).map_err(|e| e.to_string())?;
        self.grants.insert(step.req("id").into(), auth.auth_id.clone());
        Ok(format!("auth={} window={from}..{until}", auth.auth_id))
    }

    fn extend(&mut self, step: &Step) -> StepResult {
        let auth = self.auth_id(step.req("grant"));
        let before = self.dep.notifier().len();
        let ext = self.dep.extend_purpose(&auth, step.req("purpose"), self.now).map_err(|e| e.to_string())?;
        self.grants.insert(step.req("id").into(), ext.auth_id.clone());
        let notified = self.dep.notifier().len() - before;
        Ok(format!("auth={} status={} notified={notified}", ext.auth_id, ext.status.as_str()))
    }

    fn consent(&mut self, step: &Step) -> StepResult {
        let master = self.master_id(step.req("master"))?;
        let domain = match step.get("silo") {
            Some(d) => d.to_string(),
            None => self
                .holdings
                .get(&master)
                .and_then(|h| h.iter().next().cloned())
                .ok_or("master holds no data; name a silo=")?,
        };
        let vid = self.dep.derive_vid(&master, &domain).map_err(|e| e.to_string())?;
        let purpose = step.req("purpose");
        match step.keyword {
            Keyword::Consent => self.dep.record_consent(&vid, purpose, self.now).map(|_| "live".into()),
            Keyword::Renew => self.dep.renew_consent(&vid, purpose, self.now).map(|_| "renewed".into()),
            _ => {
                let held = self.holdings.get(&master).map_or(0, BTreeSet::len);
                let (_, obligations) = self.dep.opt_out(&vid, purpose, self.now).map_err(|e| e.to_string())?;
                let proofs = self.dep.process_pending_deletions(self.now).map_err(|e| e.to_string())?;
                let mut erased = 0;
                for p in &proofs {
                    erased += p.record_ids.len();
                    self.deleted.extend(p.record_ids.iter().cloned());
                }
                self.proofs.extend(proofs);
                self.holdings.remove(&master);
                let mut out = format!("obligations={} erased_records={erased}", obligations.len());
                // One obligation per silo the subject had data in.
                if obligations.len() != held {
                    self.mismatches += 1;
                    let _ = write!(out, " MISMATCH expected_obligations={held}");
                }
                return Ok(out);
            }
        }
        .map_err(|e| e.to_string())
    }

    fn grant_scope(&self, auth_id: &str) -> Option<(Scope, String)> {
        self.dep.registry().auth(auth_id).map(|a| (a.scope.clone(), a.purpose_code.clone()))
    }

    #[allow(clippy::too_many_arguments)]
    fn build_request(
        &mut self,
        id: &str,
        auth_id: &str,
        program: &str,
        artifact: Option<Vec<u8>>,
        scope: Scope,
        purpose: &str,
        subjects: Vec<VirtualId>,
        signer: &Signer,
        timestamp: Timestamp,
    ) -> AccessRequest {
        let artifact = artifact.unwrap_or_else(|| self.programs.get(program).cloned().unwrap_or_default());
        let draft = RequestDraft {
            request_id: id.into(),
            program_id: program.into(),
            content_digest: sha256(&artifact),
            auth_id: auth_id.into(),
            scope,
            subjects,
            purpose_code: purpose.into(),
        };
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        AccessRequest::sign(draft, signer, nonce, timestamp)
    }

    fn submit(&mut self, request: AccessRequest) -> Result<AccessTicket, SubmitError> {
        self.submits += 1;
        self.wire.push(request.to_bytes().into_vec());
        let result = self.dep.submit(&request, self.now);
        if let Ok(t) = &result {
            self.wire.push(t.to_bytes().into_vec());
        }
        self.requests.insert(request.request_id.clone(), Submitted { request, ticket: result.as_ref().ok().cloned() });
        result
    }

    /// Request for `masters` under a grant, with the grant's scope and
    /// purpose unless overridden.
    fn request_for(&mut self, step: &Step, id: &str, masters: &[&str], artifact: Option<Vec<u8>>) -> Result<AccessRequest, String> {
        let auth = self.auth_id(step.req("grant"));
        let (grant_scope, grant_purpose) = self.grant_scope(&auth).ok_or("grant is not registered")?;
        let scope: Scope = step.get("scope").map_or(grant_scope, |s| s.parse().expect("validated scope"));
        let purpose = step.get("purpose").unwrap_or(&grant_purpose).to_string();
        let mut subjects = Vec::new();
        for m in masters {
            let master = self.master_id(m)?;
            subjects.push(self.subject_vid(&master, step.get("silo"), &scope)?);
        }
        let signer = match step.get("requester") {
            None => self.controller.clone(),
            Some(k) if k == CONTROLLER_KEY_ID => self.controller.clone(),
            Some(k) => Signer::from_seed(k, Role::Controller, sha256(k.as_bytes())),
        };
        Ok(self.build_request(id, &auth, step.req("program"), artifact, scope, &purpose, subjects, &signer, self.now))
    }

    fn submit_step(&mut self, step: &Step) -> StepResult {
        let masters = step.list("subjects");
        let artifact = step.get("artifact").map(|a| a.as_bytes().to_vec());
        let request = self.request_for(step, step.req("id"), &masters, artifact)?;
        let result = self.submit(request);
        let class = classify(&result);
        let detail = match &result {
            Ok(t) => format!(" ticket={} shares={}", t.ticket_id, t.regulator_shares.len()),
            _ => String::new(),
        };
        Ok(format!("{class}{detail}{}", self.expect(step, &class)))
    }

    fn controller_share_for(&self, record_id: &str) -> Option<KeyShare> {
        let deposit = self.dep.gate().deposit_for(record_id)?;
        self.dep.silo(&deposit.vid.domain)?.controller_share(record_id).ok().cloned()
    }

    /// Opens every record on the ticket. Returns per-result counts.
    fn open_all(&mut self, ticket: &AccessTicket, share: &str) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for record_id in ticket.regulator_shares.keys() {
            let own = self.controller_share_for(record_id).unwrap_or(KeyShare { share: [0; 32], holder: Custodian::Controller });
            let presented = match share {
                "zero" => KeyShare { share: [0; 32], holder: Custodian::Controller },
                "random" => KeyShare::generate(Custodian::Controller, &mut self.rng),
                _ => own,
            };
            let result = self.dep.open_record(ticket, record_id, &presented, self.now);
            let key = match result {
                Ok(_) => {
                    self.plaintexts += 1;
                    "released".to_string()
                }
                Err(e) => e.as_str().to_string(),
            };
            *counts.entry(key).or_insert(0) += 1;
        }
        counts
    }

    fn open_step(&mut self, step: &Step) -> StepResult {
        let ticket = self.requests.get(step.req("request")).and_then(|s| s.ticket.clone()).ok_or("request holds no ticket")?;
        let counts = self.open_all(&ticket, step.get("share").unwrap_or("own"));
        let text = counts.iter().map(|(k, n)| format!("{k}={n}")).collect::<Vec<_>>().join(" ");
        let expected = step.get("expect").unwrap_or("released");
        let mut out = if text.is_empty() { "records=0".to_string() } else { text };
        if counts.keys().any(|k| k != expected) {
            self.mismatches += 1;
            let _ = write!(out, " MISMATCH expected={expected}");
        }
        Ok(out)
    }

    fn vault_op(&mut self, step: &Step) -> StepResult {
        let master = self.master_id(step.req("master"))?;
        let ticket = match step.get("request") {
            Some(r) => Some(self.requests.get(r).and_then(|s| s.ticket.clone()).ok_or("request holds no ticket")?),
            None => None,
        };
        let result = if step.keyword == Keyword::Resolve {
            let vid = self.dep.derive_vid(&master, step.req("silo")).map_err(|e| e.to_string())?;
            self.dep.resolve(&vid, ticket.as_ref(), self.now).map(|_| ())
        } else {
            let vid = self.dep.derive_vid(&master, step.req("from")).map_err(|e| e.to_string())?;
            self.dep.link(&vid, step.req("to"), ticket.as_ref(), self.now).map(|_| ())
        };
        let kind = match result {
            Ok(()) => "ok".to_string(),
            Err(e) => deploy_kind(&e),
        };
        Ok(format!("{kind}{}", self.expect(step, &kind)))
    }

    fn alias(&mut self, step: &Step) -> StepResult {
        let master = self.master_id(step.req("master"))?;
        let ttl = step.num("ttl").unwrap();
        let grant = self.dep.issue_alias(&master, ttl, self.now).map_err(|e| e.to_string())?;
        self.aliases.insert(step.req("id").into(), grant.alias_number);
        Ok(format!("expires_at={}", grant.expires_at))
    }

    fn populate(&mut self, step: &Step) -> StepResult {
        let n = step.num("n").unwrap() as usize;
        let domains: Vec<String> = step.list("domains").into_iter().map(String::from).collect();
        let start = self.population.len();
        for i in start..start + n {
            let attrs: BTreeMap<String, String> = [
                ("name".to_string(), format!("Population Person {i:05}")),
                ("address".to_string(), format!("{i:05} Sentinel Street")),
                ("real_phone".to_string(), format!("+1555{i:07}")),
            ]
            .into();
            self.sentinels.extend(attrs.values().cloned());
            let id = self.dep.register_master(attrs, self.now).map_err(|e| e.to_string())?;
            self.population.push(id);
        }
        let mut records = 0;
        for d in &domains {
            let names: Vec<String> =
                self.dep.silo(d).ok_or_else(|| format!("no silo {d}"))?.schema().field_classes.keys().cloned().collect();
            // Each silo receives the population in its own random order.
            let mut order: Vec<MasterId> = self.population[start..].to_vec();
            for i in (1..order.len()).rev() {
                order.swap(i, (self.rng.next_u64() % (i as u64 + 1)) as usize);
            }
            for m in order {
                let fields = names.iter().map(|f| (f.clone(), format!("{:06}", self.rng.next_u64() % 1_000_000))).collect();
                self.put_fields(m, d, fields)?;
                records += 1;
            }
        }
        for d in domains {
            if !self.population_domains.contains(&d) {
                self.population_domains.push(d);
            }
        }
        Ok(format!("subjects={} domains={} records={records}", self.population.len(), self.population_domains.len()))
    }

    /// Masters with data in `domain`, in a stable order.
    fn pool(&self, domain: &str) -> Vec<MasterId> {
        self.holdings.iter().filter(|(_, ds)| ds.contains(domain)).map(|(m, _)| *m).collect()
    }

    fn pick_subjects(&mut self, pool: &[MasterId], domain: &str, max: usize) -> Result<Vec<VirtualId>, String> {
        let want = 1 + (self.rng.next_u64() as usize % max.min(pool.len()));
        let mut picked: Vec<MasterId> = Vec::new();
        while picked.len() < want {
            let m = pool[self.rng.next_u64() as usize % pool.len()];
            if !picked.contains(&m) {
                picked.push(m);
            }
        }
        picked.iter().map(|m| self.dep.derive_vid(m, domain).map_err(|e| e.to_string())).collect()
    }

    /// Randomized mix of honest and hostile submissions; every allowed
    /// ticket is opened.
    fn traffic(&mut self, step: &Step) -> StepResult {
        let n = step.num("n").unwrap();
        let auth = self.auth_id(step.req("grant"));
        let program = step.req("program").to_string();
        let (scope, purpose) = self.grant_scope(&auth).ok_or("grant is not registered")?;
        let domain = scope.domains.iter().next().cloned().ok_or("grant scope has no domains")?;
        let pool = self.pool(&domain);
        if pool.is_empty() {
            return Err(format!("no subjects hold data in {domain}"));
        }
        let usable = self.dep.registry().auth(&auth).is_some_and(|a| a.in_window(self.now) && a.status != pdgate_core::registry::AuthStatus::Revoked);
        let consent_basis = self.dep.registry().auth(&auth).is_some_and(|a| a.basis == Basis::Consent);
        let mut tally: BTreeMap<String, usize> = BTreeMap::new();
        let mut sent: Vec<AccessRequest> = Vec::new();
        let mut first_bad: Option<String> = None;
        let mut bad = 0;
        for i in 0..n {
            let kind = match self.rng.next_u64() % 8 {
                4 if sent.is_empty() => 0,
                k => k,
            };
            let id = format!("t{}-{i:04}", step.line);
            let subjects = self.pick_subjects(&pool, &domain, 3)?;
            let signer = self.controller.clone();
            let (request, expected): (AccessRequest, Option<String>) = match kind {
                1 => {
                    let r = self.build_request(&id, &auth, &program, None, scope.clone(), "WRONG_PURPOSE", subjects, &signer, self.now);
                    (r, Some(Denial::Registry(DenyReason::PurposeMatch).to_string()))
                }
                2 => {
                    let mut art = self.programs.get(&program).cloned().unwrap_or_default();
                    art.push(0x01);
                    let r = self.build_request(&id, &auth, &program, Some(art), scope.clone(), &purpose, subjects, &signer, self.now);
                    (r, Some(Denial::Registry(DenyReason::Manifest).to_string()))
                }
                3 => {
                    let mut wide = scope.clone();
                    wide.fields.extend(FieldClass::ALL);
                    let r = self.build_request(&id, &auth, &program, None, wide, &purpose, subjects, &signer, self.now);
                    let expect = (wide_differs(&scope)).then(|| Denial::Registry(DenyReason::Scope).to_string());
                    (r, expect)
                }
                4 => {
                    let r = sent[self.rng.next_u64() as usize % sent.len()].clone();
                    (r, Some(Denial::Replay.to_string()))
                }
                5 => {
                    let r = self.build_request(&id, &auth, &program, None, scope.clone(), &purpose, subjects, &signer, self.now + 1_000);
                    (r, Some(Denial::Stale.to_string()))
                }
                6 => {
                    let mut r = self.build_request(&id, &auth, &program, None, scope.clone(), &purpose, subjects, &signer, self.now);
                    r.signature.0[0] ^= 0x01;
                    (r, Some(Denial::Signature.to_string()))
                }
                7 => {
                    let r = self.build_request(&id, "auth-unknown", &program, None, scope.clone(), &purpose, subjects, &signer, self.now);
                    (r, Some(Denial::Registry(DenyReason::Existence).to_string()))
                }
                _ => {
                    let r = self.build_request(&id, &auth, &program, None, scope.clone(), &purpose, subjects, &signer, self.now);
                    (r, (!consent_basis).then(|| "Allow".to_string()))
                }
            };
            let result = self.submit(request.clone());
            let class = classify(&result);
            if result.is_ok() {
                sent.push(request);
            }
            // Registry reasons only hold while the grant itself is usable;
            // signature, replay and freshness never depend on it.
            let checkable = usable || matches!(kind, 4..=6);
            if let Some(e) = expected.filter(|_| checkable) {
                if e != class && !(consent_basis && class == "Deny(Consent)") {
                    bad += 1;
                    first_bad.get_or_insert(format!("kind{kind}:{e}/{class}"));
                }
            }
            *tally.entry(class).or_insert(0) += 1;
            if let Ok(ticket) = result {
                let counts = self.open_all(&ticket, "own");
                bad += counts.keys().filter(|k| *k != "released").count();
            }
        }
        self.mismatches += bad;
        let mut out = format!("submits={n}");
        for (k, v) in &tally {
            let _ = write!(out, " {k}={v}");
        }
        if bad > 0 {
            let _ = write!(out, " MISMATCH unexpected={bad}");
            if let Some(f) = first_bad {
                let _ = write!(out, " first={f}");
            }
        }
        Ok(out)
    }

    /// k valid submissions from k threads at once; the ledgers must grow by
    /// exactly k contiguous entries each.
    fn concurrent(&mut self, step: &Step) -> StepResult {
        let k = step.num("k").unwrap() as usize;
        let auth = self.auth_id(step.req("grant"));
        let program = step.req("program").to_string();
        let (scope, purpose) = self.grant_scope(&auth).ok_or("grant is not registered")?;
        let domain = scope.domains.iter().next().cloned().ok_or("grant scope has no domains")?;
        let pool = self.pool(&domain);
        if pool.is_empty() {
            return Err(format!("no subjects hold data in {domain}"));
        }
        let signer = self.controller.clone();
        let mut requests = Vec::with_capacity(k);
        for i in 0..k {
            let subjects = vec![self.dep.derive_vid(&pool[i % pool.len()], &domain).map_err(|e| e.to_string())?];
            let id = format!("c{}-{i:04}", step.line);
            requests.push(self.build_request(&id, &auth, &program, None, scope.clone(), &purpose, subjects, &signer, self.now));
        }
        let before = (self.dep.ledgers().regulator.ledger().len(), self.dep.ledgers().controller.ledger().len());
        let now = self.now;
        let shared = Mutex::new(&mut self.dep);
        let results: Vec<Result<AccessTicket, SubmitError>> = thread::scope(|s| {
            let handles: Vec<_> = requests
                .iter()
                .map(|r| {
                    let shared = &shared;
                    s.spawn(move || shared.lock().expect("no panics while locked").submit(r, now))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("submit thread")).collect()
        });
        self.submits += k as u64;
        let mut allowed = 0;
        for (r, res) in requests.into_iter().zip(results) {
            self.wire.push(r.to_bytes().into_vec());
            if let Ok(t) = &res {
                allowed += 1;
                self.wire.push(t.to_bytes().into_vec());
            }
            self.requests.insert(r.request_id.clone(), Submitted { request: r, ticket: res.ok() });
        }
        let reg = self.dep.ledgers().regulator.ledger();
        let ctl = self.dep.ledgers().controller.ledger();
        let delta = (reg.len() - before.0, ctl.len() - before.1);
        let contiguous = reg.entries().iter().enumerate().all(|(i, e)| e.seq == i as u64)
            && ctl.entries().iter().enumerate().all(|(i, e)| e.seq == i as u64);
        let mut out = format!("k={k} allowed={allowed} ledger_delta={}/{} seq_contiguous={contiguous}", delta.0, delta.1);
        if delta != (k, k) || !contiguous {
            self.mismatches += 1;
            out.push_str(" MISMATCH");
        }
        Ok(out)
    }

    // attacks

    fn attack(&mut self, step: &Step) -> AttackFinding {
        let kind = step.attack().expect("attack step");
        let (caught, detail) = match kind {
            AttackKind::CrossSiloLink => self.attack_link(),
            AttackKind::ReplayRequest => self.attack_replay(step),
            AttackKind::TamperProgram => self.attack_tamper(step),
            AttackKind::TruncateLedger => self.attack_ledger(step),
            AttackKind::ForgeTicket => self.attack_forge(step),
            AttackKind::AccessAfterOptOut => self.attack_after_opt_out(step),
            AttackKind::WeakIdSmuggle => self.attack_smuggle(step),
        }
        .unwrap_or_else(|e| (false, format!("error: {e}")));
        AttackFinding { line: step.line, kind, caught, detail }
    }

    fn attack_link(&mut self) -> Result<(bool, String), String> {
        let view = linkage::silo_view(&self.dep, &self.population_domains);
        let truth = linkage::truth_from_vault(&self.dep, &self.population, &self.population_domains);
        let result = linkage::adversary_link_accuracy(&view, &truth);
        self.linkage = Some(result.clone());
        let report = match result {
            Ok(r) => r,
            Err(e) => return Ok((false, e.to_string())),
        };
        let secret = self.dep.vault().snapshot().secret;
        let control = linkage::control_link_accuracy(&secret, &self.population, &view, &truth);
        // The only sanctioned linking path needs a ticket.
        let first = self.population[0];
        let vid = self.dep.derive_vid(&first, &self.population_domains[0]).map_err(|e| e.to_string())?;
        let unticketed = match self.dep.link(&vid, &self.population_domains[1], None, self.now) {
            Ok(_) => "ok".to_string(),
            Err(e) => deploy_kind(&e),
        };
        let threshold = linkage_threshold(report.subjects);
        let caught = report.accuracy <= threshold && control == 1.0 && unticketed == "Unauthorized";
        let strategies =
            report.per_strategy.iter().map(|(s, a)| format!("{}={a:.4}", s.as_str())).collect::<Vec<_>>().join(" ");
        Ok((
            caught,
            format!(
                "subjects={} domains={} accuracy={:.4} baseline={:.4} threshold={threshold:.4} {strategies} control={control:.4} unticketed_link={unticketed}",
                report.subjects, report.domains, report.accuracy, report.baseline
            ),
        ))
    }

    fn attack_replay(&mut self, step: &Step) -> Result<(bool, String), String> {
        let request = self.requests.get(step.req("request")).map(|s| s.request.clone()).ok_or("request was never submitted")?;
        let class = classify(&self.submit(request));
        Ok((class == "Deny(Replay)", format!("resubmitted={class}")))
    }

    fn attack_tamper(&mut self, step: &Step) -> Result<(bool, String), String> {
        let program = step.req("program");
        let mut artifact = self.programs.get(program).cloned().ok_or("program was never signed")?;
        match artifact.first_mut() {
            Some(b) => *b ^= 0x01,
            None => artifact.push(0x01),
        }
        let attested = self.dep.verify_program_runtime(program, &sha256(&artifact)).unwrap_or(false);
        let id = format!("attack-{}", step.line);
        let request = self.request_for(step, &id, &step.list("subjects"), Some(artifact))?;
        let class = classify(&self.submit(request));
        Ok((class == "Deny(Manifest)" && !attested, format!("submitted={class} runtime_attestation={attested}")))
    }

    fn attack_ledger(&mut self, step: &Step) -> Result<(bool, String), String> {
        let party = step.get("party").unwrap_or("controller");
        let mode = step.get("mode").unwrap_or("truncate");
        let (own_signer, other_signer) = if party == "regulator" {
            (self.regulator.clone(), self.controller.clone())
        } else {
            (self.controller.clone(), self.regulator.clone())
        };
        let pair = self.dep.ledgers();
        let (own, other) = if party == "regulator" {
            (pair.regulator.ledger().entries().to_vec(), pair.controller.ledger().entries().to_vec())
        } else {
            (pair.controller.ledger().entries().to_vec(), pair.regulator.ledger().entries().to_vec())
        };
        if own.is_empty() {
            return Ok((false, "ledger is empty; nothing to tamper with".into()));
        }
        let (forged, what) = tamper_ledger(&own, &other, &own_signer, &other_signer, mode, &mut self.rng, self.now)?;
        let own_ledger = Ledger::from_entries(own_signer.identity().clone(), forged.clone());
        let other_ledger = Ledger::from_entries(other_signer.identity().clone(), other.clone());
        let own_chain = own_ledger.verify_chain();
        let (reg, ctl) = if party == "regulator" { (&own_ledger, &other_ledger) } else { (&other_ledger, &own_ledger) };
        let cross = cross_verify(reg, ctl);
        let verdict = verify_logs(
            &render_ledger(reg.entries()),
            &render_ledger(ctl.entries()),
            self.regulator.identity(),
            self.controller.identity(),
        )
        .map(|v| v.is_ok())
        .unwrap_or(false);
        let caught = matches!(cross, CrossStatus::Divergence { .. }) && !verdict;
        Ok((caught, format!("party={party} {what} forged_chain={own_chain} cross={cross}")))
    }

    fn attack_forge(&mut self, step: &Step) -> Result<(bool, String), String> {
        let submitted = self.requests.get(step.req("request")).ok_or("request was never submitted")?;
        let request = submitted.request.clone();
        let base = submitted.ticket.clone().unwrap_or_else(|| AccessTicket {
            ticket_id: "tkt-forged".into(),
            request_id: request.request_id.clone(),
            grantee: request.requester_key_id.clone(),
            purpose_code: request.purpose_code.clone(),
            granted_scope: request.scope.clone(),
            subjects: request.subjects.clone(),
            regulator_shares: BTreeMap::new(),
            issued_at: self.now,
            expires_at: self.now + 60,
            signature: Signature([0; 64]),
        });
        let target = base
            .regulator_shares
            .keys()
            .next()
            .cloned()
            .or_else(|| self.dep.silos().flat_map(|s| s.records().map(|r| r.record_id.clone())).next())
            .unwrap_or_else(|| "rec-none".into());

        let mut extended = base.clone();
        extended.issued_at = self.now;
        extended.expires_at = self.now + 10_000;
        let mut self_signed = base.clone();
        self_signed.ticket_id = "tkt-self".into();
        self_signed.issued_at = self.now;
        self_signed.expires_at = self.now + 60;
        self_signed.regulator_shares.insert(target.clone(), KeyShare::generate(Custodian::Regulator, &mut self.rng));
        self_signed.signature = self.controller.sign(&self_signed.signing_bytes());
        let mut widened = base.clone();
        widened.granted_scope.fields.extend(FieldClass::ALL);
        widened.regulator_shares.insert(target.clone(), KeyShare::generate(Custodian::Regulator, &mut self.rng));

        let subject = base.subjects.first().cloned();
        let mut opens = Vec::new();
        let mut vault = Vec::new();
        for forged in [&extended, &self_signed, &widened] {
            let share = self.controller_share_for(&target).unwrap_or(KeyShare { share: [0; 32], holder: Custodian::Controller });
            let r = self.dep.open_record(forged, &target, &share, self.now);
            opens.push(r.err());
            if let Some(s) = &subject {
                vault.push(match self.dep.resolve(s, Some(forged), self.now) {
                    Ok(_) => "ok".to_string(),
                    Err(e) => deploy_kind(&e),
                });
            }
        }
        let caught = opens.iter().all(|e| *e == Some(OpenError::InvalidTicket)) && vault.iter().all(|v| v == "Unauthorized");
        let opens = opens.iter().map(|e| e.map_or("released", OpenError::as_str)).collect::<Vec<_>>().join(",");
        Ok((caught, format!("forgeries=3 open={opens} resolve={}", vault.join(","))))
    }

    fn attack_after_opt_out(&mut self, step: &Step) -> Result<(bool, String), String> {
        let id = format!("attack-{}", step.line);
        let master = step.req("master").to_string();
        let request = self.request_for(step, &id, &[&master], None)?;
        let subject = request.subjects[0].clone();
        let class = classify(&self.submit(request));
        let notified =
            self.dep.notifier().mailbox(&subject).iter().any(|n| n.request_id == id && n.outcome == Outcome::Denied);
        Ok((class == "Deny(Consent)" && notified, format!("submitted={class} denied_notification={notified}")))
    }

    fn attack_smuggle(&mut self, step: &Step) -> Result<(bool, String), String> {
        let field = step.get("field").unwrap_or("name");
        self.smuggles += 1;
        let domain = format!("smuggle{}", self.smuggles);
        let named = SiloSchema::new(&domain, [(field, FieldClass::Other), ("amount", FieldClass::Financial)]);
        let contact = SiloSchema::new(&domain, [("reach", FieldClass::Contact), ("amount", FieldClass::Financial)]);
        let mut results = Vec::new();
        for schema in [named, contact] {
            results.push(match self.dep.create_silo(schema) {
                Ok(()) => "accepted".to_string(),
                Err(e) => deploy_kind(&e),
            });
        }
        let caught = results.iter().all(|r| r == "WeakIdentifierRejected") && self.dep.silo(&domain).is_none();
        Ok((caught, format!("field={field} schema={} unapproved_contact={}", results[0], results[1])))
    }

    // invariants

    fn invariants(&mut self) -> Vec<InvariantCheck> {
        let mut out = Vec::new();
        let reg = self.dep.ledgers().regulator.ledger().clone();
        let ctl = self.dep.ledgers().controller.ledger().clone();
        let (rc, cc) = (reg.verify_chain(), ctl.verify_chain());
        out.push(InvariantCheck {
            name: "ledger_chains",
            passed: rc == ChainStatus::Ok && cc == ChainStatus::Ok,
            detail: format!("regulator={rc} controller={cc} entries={}/{}", reg.len(), ctl.len()),
        });
        let cross = cross_verify(&reg, &ctl);
        out.push(InvariantCheck { name: "cross_verify", passed: cross == CrossStatus::Ok, detail: format!("status={cross}") });
        out.push(self.access_bijection(&reg, &ctl));
        out.push(self.notification_bijection(&reg));
        out.push(self.sentinel_scan());
        out.push(self.no_bypass());
        out.push(self.dual_custody());
        out.push(self.opt_out_check());
        out.push(self.deletion_check());
        let caught = self.attacks.iter().filter(|a| a.caught).count();
        out.push(InvariantCheck {
            name: "attacks",
            passed: caught == self.attacks.len(),
            detail: format!("caught={caught}/{}", self.attacks.len()),
        });
        out.push(InvariantCheck {
            name: "expectations",
            passed: self.mismatches == 0,
            detail: format!("mismatches={}", self.mismatches),
        });
        out
    }

    fn access_bijection(&self, reg: &Ledger, ctl: &Ledger) -> InvariantCheck {
        let events = |l: &Ledger| -> Result<Vec<AuditEvent>, String> {
            l.entries().iter().map(|e| AuditEvent::decode(&e.payload).map_err(|e| e.to_string())).collect()
        };
        let (reg_events, ctl_events) = match (events(reg), events(ctl)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                return InvariantCheck { name: "access_bijection", passed: false, detail: format!("undecodable entry: {e}") }
            }
        };
        let r = reg_events.iter().filter(|e| e.is_submission()).count() as u64;
        let c = ctl_events.iter().filter(|e| e.is_submission()).count() as u64;
        let mut access_ids = BTreeSet::new();
        let mut allowed_ids = BTreeSet::new();
        let mut allowed = 0;
        for e in &reg_events {
            if let AuditEvent::Access { request_id, outcome, .. } = e {
                access_ids.insert(request_id.clone());
                if matches!(outcome, AccessOutcome::Allowed { .. }) {
                    allowed += 1;
                    allowed_ids.insert(request_id.clone());
                }
            }
        }
        let notified_allowed: BTreeSet<String> = self
            .dep
            .notifier()
            .all()
            .filter(|n| n.outcome == Outcome::Allowed && access_ids.contains(&n.request_id))
            .map(|n| n.request_id.clone())
            .collect();
        let passed = self.submits == r && r == c && allowed == allowed_ids.len() && notified_allowed == allowed_ids;
        InvariantCheck {
            name: "access_bijection",
            passed,
            detail: format!(
                "submits={} regulator={r} controller={c} allowed={allowed} allowed_notified={}",
                self.submits,
                notified_allowed.len()
            ),
        }
    }

    fn notification_bijection(&self, reg: &Ledger) -> InvariantCheck {
        let mut expected = BTreeSet::new();
        for e in reg.entries() {
            if let Ok(event) = AuditEvent::decode(&e.payload) {
                for (subject, request_id, _, _) in event.notifications() {
                    expected.insert((subject, request_id));
                }
            }
        }
        let actual = self.dep.notifier().pairs();
        InvariantCheck {
            name: "notification_bijection",
            passed: &expected == actual,
            detail: format!("ledger_pairs={} notified_pairs={}", expected.len(), actual.len()),
        }
    }

    fn sentinel_scan(&self) -> InvariantCheck {
        let mut files = state_files(&self.dep);
        files.remove(VAULT_FILE);
        for (i, w) in self.wire.iter().enumerate() {
            files.insert(format!("wire/{i:05}"), w.clone());
        }
        let needles: Vec<Vec<u8>> = self.sentinels.iter().map(|s| s.as_bytes().to_vec()).collect();
        let hits = scan(&files, &needles);
        let mut detail = format!(
            "sentinels={} files={} wire_messages={} hits={}",
            needles.len(),
            files.len() - self.wire.len(),
            self.wire.len(),
            hits.len()
        );
        if let Some((file, _)) = hits.first() {
            let _ = write!(detail, " first_hit={file}");
        }
        InvariantCheck { name: "sentinel_scan", passed: hits.is_empty(), detail }
    }

    fn no_bypass(&self) -> InvariantCheck {
        let gate = self.dep.gate();
        let (releases, consumed) = (gate.releases(), gate.consumed_count() as u64);
        InvariantCheck {
            name: "no_bypass",
            passed: releases == consumed && consumed == self.plaintexts,
            detail: format!("releases={releases} consumed={consumed} plaintexts={}", self.plaintexts),
        }
    }

    fn dual_custody(&mut self) -> InvariantCheck {
        let mut records = 0;
        let mut probes = 0;
        let mut single_share_opened = 0;
        let mut full_pair_failed = 0;
        let zero = |holder| KeyShare { share: [0; 32], holder };
        let all: Vec<_> = self.dep.silos().flat_map(|s| s.records().cloned()).collect();
        for r in all {
            records += 1;
            let Some(deposit) = self.dep.gate().deposit_for(&r.record_id).cloned() else {
                full_pair_failed += 1;
                continue;
            };
            let ctl = r.controller_share.clone();
            let reg = deposit.share;
            let singles = [
                (ctl.clone(), zero(Custodian::Regulator)),
                (ctl.clone(), KeyShare::generate(Custodian::Regulator, &mut self.rng)),
                (zero(Custodian::Controller), reg.clone()),
                (KeyShare::generate(Custodian::Controller, &mut self.rng), reg.clone()),
            ];
            for (a, b) in singles {
                probes += 1;
                let key = combine_shares(&a, &b).expect("distinct holders");
                if decrypt_record(&key, &r.record_id, &r.vid, &r.ciphertext).is_ok() {
                    single_share_opened += 1;
                }
            }
            let key = combine_shares(&ctl, &reg).expect("distinct holders");
            if decrypt_record(&key, &r.record_id, &r.vid, &r.ciphertext).is_err() {
                full_pair_failed += 1;
            }
        }
        InvariantCheck {
            name: "dual_custody",
            passed: single_share_opened == 0 && full_pair_failed == 0,
            detail: format!(
                "records={records} single_share_probes={probes} single_share_opened={single_share_opened} full_pair_failed={full_pair_failed}"
            ),
        }
    }

    /// For every withdrawn (subject, purpose), every consent-based grant for
    /// that purpose must deny the subject.
    fn opt_out_check(&self) -> InvariantCheck {
        let registry = self.dep.registry();
        let mut pairs = 0;
        let mut checks = 0;
        let mut violations = 0;
        for (subject, purpose) in registry.opted_out_pairs() {
            if registry.consent_live(&subject, &purpose) {
                continue;
            }
            pairs += 1;
            for auth in registry.auths().filter(|a| a.basis == Basis::Consent && a.purpose_code == purpose) {
                let digest = registry
                    .manifests()
                    .find(|m| m.declared_purpose == purpose && auth.scope.is_within(&m.allowed_scope))
                    .map_or([0; 32], |m| m.content_digest);
                checks += 1;
                if registry.check(&auth.auth_id, &digest, &auth.scope, &purpose, &subject, self.now) == Decision::Allow {
                    violations += 1;
                }
            }
        }
        InvariantCheck {
            name: "opt_out",
            passed: violations == 0,
            detail: format!("withdrawn_pairs={pairs} checks={checks} violations={violations}"),
        }
    }

    fn deletion_check(&self) -> InvariantCheck {
        let reg_id = self.dep.regulator_identity();
        let ctl_id = self.dep.controller_identity();
        let verified = self.proofs.iter().filter(|p| p.verify(ctl_id, reg_id)).count();
        let filed = self.dep.registry().deletion_proofs().count();
        let lingering = self
            .deleted
            .iter()
            .filter(|id| self.dep.gate().deposit_for(id).is_some() || self.dep.silos().any(|s| s.record(id).is_some()))
            .count();
        let mut needles = Vec::new();
        for id in &self.deleted {
            if let Some(c) = self.captured.get(id) {
                needles.push(c.ciphertext.clone());
                for share in [&c.controller, &c.regulator] {
                    needles.push(share.to_vec());
                    needles.push(to_hex(share).into_bytes());
                }
            }
        }
        let residue = scan(&state_files(&self.dep), &needles).len();
        InvariantCheck {
            name: "deletion",
            passed: verified == self.proofs.len() && filed == self.proofs.len() && lingering == 0 && residue == 0,
            detail: format!(
                "proofs={} verified={verified} filed={filed} erased_records={} lingering={lingering} residue_hits={residue}",
                self.proofs.len(),
                self.deleted.len()
            ),
        }
    }
}

fn wide_differs(scope: &Scope) -> bool {
    scope.fields.len() < FieldClass::ALL.len()
}

/// Rewrites one party's ledger with its own key: `truncate` drops a random
/// number of trailing entries, `insert` splices a fabricated entry in at a
/// random position and re-signs everything after it.
pub fn tamper_ledger(
    own: &[LogEntry],
    other: &[LogEntry],
    own_signer: &Signer,
    other_signer: &Signer,
    mode: &str,
    rng: &mut impl RngCore,
    now: Timestamp,
) -> Result<(Vec<LogEntry>, String), String> {
    if mode == "truncate" {
        let drop = 1 + (rng.next_u64() as usize % own.len());
        return Ok((own[..own.len() - drop].to_vec(), format!("mode=truncate dropped={drop}")));
    }
    let at = rng.next_u64() as usize % (own.len() + 1);
    let other_ledger = Ledger::from_entries(other_signer.identity().clone(), other.to_vec());
    let own_ledger = Ledger::from_entries(own_signer.identity().clone(), own.to_vec());
    // Prefix length of the counterpart for every head hash it ever had.
    let mut prefix_of: HashMap<[u8; 32], usize> = HashMap::new();
    prefix_of.insert(Ledger::new(other_signer.identity().clone()).head_hash(), 0);
    for (i, e) in other.iter().enumerate() {
        prefix_of.insert(e.entry_hash(), i + 1);
    }
    let counterpart_head = |len: usize| {
        LedgerWriter::resume(other_signer.clone(), own_signer.identity().clone(), other[..len].to_vec(), &own_ledger).head()
    };
    let mut writer = LedgerWriter::resume(own_signer.clone(), other_signer.identity().clone(), own[..at].to_vec(), &other_ledger);
    let seen = own[..at].last().and_then(|e| prefix_of.get(&e.cross_head).copied()).unwrap_or(0);
    let fabricated = AuditEvent::Protocol { request_digest: [0xfa; 32], reason: "fabricated".into() }.encode().into_vec();
    writer.append(fabricated, &counterpart_head(seen), now).map_err(|e| e.to_string())?;
    for e in &own[at..] {
        let len = prefix_of.get(&e.cross_head).copied().ok_or("entry references unknown counterpart head")?;
        writer.append(e.payload.clone(), &counterpart_head(len), e.timestamp).map_err(|e| e.to_string())?;
    }
    Ok((writer.ledger().entries().to_vec(), format!("mode=insert position={at}")))
}

/// `(file, needle index)` for every needle found in any file. Ledger and
/// journal lines are also searched after base64 decoding.
pub fn scan(files: &BTreeMap<String, Vec<u8>>, needles: &[Vec<u8>]) -> Vec<(String, usize)> {
    use base64::engine::general_purpose::STANDARD as B64;
    use base64::Engine;

    let mut by_len: BTreeMap<usize, HashMap<&[u8], usize>> = BTreeMap::new();
    for (i, n) in needles.iter().enumerate().filter(|(_, n)| !n.is_empty()) {
        by_len.entry(n.len()).or_default().insert(n.as_slice(), i);
    }
    let mut hits = Vec::new();
    for (name, bytes) in files {
        let mut haystacks = vec![bytes.clone()];
        if name.ends_with(".log") {
            haystacks.extend(bytes.split(|&b| b == b'\n').filter_map(|l| B64.decode(l).ok()));
        }
        let mut found = HashSet::new();
        for hay in &haystacks {
            for (len, set) in &by_len {
                for w in hay.windows(*len) {
                    if let Some(&i) = set.get(w) {
                        found.insert(i);
                    }
                }
            }
        }
        let mut found: Vec<usize> = found.into_iter().collect();
        found.sort_unstable();
        hits.extend(found.into_iter().map(|i| (name.clone(), i)));
    }
    hits
}
