//! `regctl` command line. Every command loads the state directory, acts,
//! and writes it back; output is `key=value` lines.
//!
//! Exit codes: 0 success, 1 the deployment refused (reason on stderr),
//! 2 usage or state errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Parser, Subcommand, ValueEnum};
use pdgate_core::crypto::{sha256, to_hex, Role};
use pdgate_core::gate::{AccessRequest, AccessTicket, RequestDraft, SubmitError};
use pdgate_core::registry::Basis;
use pdgate_core::silo::SiloSchema;
use pdgate_core::{DeployError, FieldClass, MasterId, Scope, Timestamp, VirtualId};
use rand_core::RngCore;

use crate::harness;
use crate::scenario::load_scenario;
use crate::store::{read_key, ClockMode, KeyPaths, Session, StateDir, StoreError, STATE_DIR_ENV};
use crate::verify::verify_logs;

#[derive(Debug, Parser)]
#[command(name = "regctl", version, about = "Operate a regulated personal-data deployment")]
pub struct Cli {
    /// State directory.
    #[arg(long, global = true, env = STATE_DIR_ENV)]
    pub state_dir: Option<PathBuf>,
    /// Deployment seed (init) or scenario seed override (run-scenario).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub clock: Option<Clock>,
    /// Pin the timestamp of this invocation.
    #[arg(long, global = true)]
    pub now: Option<Timestamp>,
    #[arg(long, global = true)]
    pub regulator_key: Option<PathBuf>,
    #[arg(long, global = true)]
    pub controller_key: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Clock {
    Logical,
    Real,
}

impl From<Clock> for ClockMode {
    fn from(c: Clock) -> Self {
        match c {
            Clock::Logical => ClockMode::Logical,
            Clock::Real => ClockMode::Real,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create a new state directory with fresh keys.
    Init,
    #[command(subcommand)]
    Vault(VaultCmd),
    #[command(subcommand)]
    Silo(SiloCmd),
    #[command(subcommand)]
    Purpose(PurposeCmd),
    #[command(subcommand)]
    Program(ProgramCmd),
    /// Issue an authorization to a grantee.
    Grant {
        #[arg(long)]
        scope: Scope,
        #[arg(long)]
        purpose: String,
        #[arg(long)]
        basis: Basis,
        #[arg(long)]
        from: Option<Timestamp>,
        #[arg(long)]
        until: Option<Timestamp>,
        #[arg(long, default_value = "controller")]
        grantee: String,
    },
    /// Extend an authorization to a new purpose; affected subjects are notified.
    Extend { auth: String, purpose: String },
    Revoke { auth: String },
    #[command(subcommand)]
    Consent(ConsentCmd),
    /// Sign and submit an access request as the controller.
    Submit {
        #[arg(long)]
        auth: String,
        #[arg(long)]
        program: String,
        /// Program artifact; its digest is what the registry attests.
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        subjects: Vec<VirtualId>,
        /// Defaults to the authorization's scope.
        #[arg(long)]
        scope: Option<Scope>,
        /// Defaults to the authorization's purpose.
        #[arg(long)]
        purpose: Option<String>,
        #[arg(long)]
        request_id: Option<String>,
        /// Write the ticket here instead of printing it.
        #[arg(long)]
        ticket_out: Option<PathBuf>,
    },
    /// Open one record with a ticket and the controller's share.
    Open { ticket: PathBuf, record: String },
    /// Check two ledger files offline.
    VerifyLogs { regulator_log: PathBuf, controller_log: PathBuf },
    /// Fetch a subject's notifications.
    Notifications {
        vid: VirtualId,
        /// Show without marking delivered.
        #[arg(long)]
        peek: bool,
    },
    /// Run a scenario file against a fresh in-memory deployment.
    RunScenario {
        file: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VaultCmd {
    /// Register a master identity from `key=value` attributes.
    Register {
        #[arg(long = "attr", required = true, value_parser = parse_pair)]
        attrs: Vec<(String, String)>,
    },
    Domain { domain: String },
    Derive { master: MasterId, domain: String },
    Alias {
        master: MasterId,
        #[arg(long)]
        ttl: u64,
    },
    Route { alias: String },
    Resolve {
        vid: VirtualId,
        #[arg(long)]
        ticket: Option<PathBuf>,
    },
    Link {
        vid: VirtualId,
        domain: String,
        #[arg(long)]
        ticket: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum SiloCmd {
    Create {
        domain: String,
        /// `name:class`, repeated.
        #[arg(long = "field", required = true, value_parser = parse_field)]
        fields: Vec<(String, FieldClass)>,
        #[arg(long)]
        contact_approved: bool,
    },
    Put {
        vid: VirtualId,
        /// `name=value`, repeated.
        #[arg(long = "field", required = true, value_parser = parse_pair)]
        fields: Vec<(String, String)>,
    },
    List { domain: String },
}

#[derive(Debug, Subcommand)]
pub enum PurposeCmd {
    Add {
        code: String,
        #[arg(long)]
        description: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ProgramCmd {
    Sign {
        id: String,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        purpose: String,
        #[arg(long)]
        scope: Scope,
    },
}

#[derive(Debug, Subcommand)]
pub enum ConsentCmd {
    Give { vid: VirtualId, purpose: String },
    Renew { vid: VirtualId, purpose: String },
    /// Withdraw consent and carry out the resulting deletions.
    Optout { vid: VirtualId, purpose: String },
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    s.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())).ok_or_else(|| format!("expected key=value, got {s:?}"))
}

fn parse_field(s: &str) -> Result<(String, FieldClass), String> {
    let (name, class) = s.split_once(':').ok_or_else(|| format!("expected name:class, got {s:?}"))?;
    Ok((name.to_string(), class.parse().map_err(|_| format!("unknown field class {class:?}"))?))
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

enum Failure {
    /// The deployment said no.
    Refused(String),
    Usage(String),
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn refused(e: impl ToString) -> Failure {
    Failure::Refused(e.to_string())
}

fn deploy_refused(e: DeployError) -> Failure {
    Failure::Refused(format!("error={e}"))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn read_ticket(path: &Path) -> Result<AccessTicket, Failure> {
    let text = read_file(path)?;
    let text = String::from_utf8_lossy(&text);
    let encoded = text.lines().find_map(|l| l.strip_prefix("ticket=")).unwrap_or(text.trim());
    let raw = B64.decode(encoded.trim()).map_err(|e| Failure::Usage(format!("{}: not a ticket: {e}", path.display())))?;
    AccessTicket::from_bytes(&raw).map_err(|e| Failure::Usage(format!("{}: not a ticket: {e}", path.display())))
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> CliOutput
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                CliOutput { code: 2, stdout: String::new(), stderr: text }
            } else {
                CliOutput { code: 0, stdout: text, stderr: String::new() }
            };
        }
    };
    let mut out = String::new();
    match execute(&cli, &mut out) {
        Ok(()) => CliOutput { code: 0, stdout: out, stderr: String::new() },
        Err(Failure::Refused(msg)) => CliOutput { code: 1, stdout: out, stderr: format!("{msg}\n") },
        Err(Failure::Usage(msg)) => CliOutput { code: 2, stdout: out, stderr: format!("regctl: {msg}\n") },
    }
}

fn keys(cli: &Cli) -> KeyPaths {
    KeyPaths { regulator: cli.regulator_key.clone(), controller: cli.controller_key.clone() }
}

fn state_dir(cli: &Cli) -> Result<&Path, Failure> {
    cli.state_dir.as_deref().ok_or_else(|| Failure::Usage(format!("no state directory (use --state-dir or {STATE_DIR_ENV})")))
}

fn execute(cli: &Cli, out: &mut String) -> Result<(), Failure> {
    match &cli.command {
        Command::Init => {
            let root = state_dir(cli)?;
            let mode = cli.clock.map_or(ClockMode::Logical, ClockMode::from);
            let (dir, session) = StateDir::init(root, cli.seed.unwrap_or(0), mode, &keys(cli))?;
            dir.save(&session)?;
            let _ = writeln!(out, "state_dir={}", root.display());
            let _ = writeln!(out, "regulator={}", session.dep.regulator_identity().key_id);
            let _ = writeln!(out, "controller={}", session.dep.controller_identity().key_id);
            let _ = writeln!(out, "seed={}", session.meta.seed);
            Ok(())
        }
        Command::VerifyLogs { regulator_log, controller_log } => verify_command(cli, regulator_log, controller_log, out),
        Command::RunScenario { file, report } => {
            let scenario = load_scenario(file).map_err(|e| Failure::Usage(e.to_string()))?;
            let result = harness::run(&scenario, cli.seed);
            let text = result.render();
            if let Some(path) = report {
                fs::write(path, &text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            }
            out.push_str(&text);
            if result.passed() {
                Ok(())
            } else {
                Err(Failure::Refused("result=FAIL".into()))
            }
        }
        _ => {
            let dir = StateDir::open(state_dir(cli)?)?;
            let mut session = dir.load(&keys(cli), cli.clock.map(ClockMode::from), cli.now)?;
            let result = stateful(cli, &mut session, out);
            // Refusals are logged too, so state is written either way.
            dir.save(&session)?;
            result
        }
    }
}

fn verify_command(cli: &Cli, reg_log: &Path, ctl_log: &Path, out: &mut String) -> Result<(), Failure> {
    let dir = match (&cli.regulator_key, &cli.controller_key) {
        (Some(_), Some(_)) => None,
        _ => Some(StateDir::open(state_dir(cli)?)?),
    };
    let key = |flag: &Option<PathBuf>, role| -> Result<_, Failure> {
        let path = flag.clone().unwrap_or_else(|| dir.as_ref().expect("state dir opened").key_path(role));
        Ok(read_key(&path, role)?.identity().clone())
    };
    let reg = key(&cli.regulator_key, Role::Regulator)?;
    let ctl = key(&cli.controller_key, Role::Controller)?;
    match verify_logs(&read_file(reg_log)?, &read_file(ctl_log)?, &reg, &ctl) {
        Ok(v) => {
            let _ = writeln!(out, "{v}");
            if v.is_ok() {
                let _ = writeln!(out, "result=ok");
                Ok(())
            } else {
                Err(Failure::Refused("result=tampered".into()))
            }
        }
        Err(e) => Err(Failure::Refused(format!("result=tampered\nreason={e}"))),
    }
}

fn stateful(cli: &Cli, s: &mut Session, out: &mut String) -> Result<(), Failure> {
    let now = s.now;
    let dep = &mut s.dep;
    match &cli.command {
        Command::Vault(cmd) => match cmd {
            VaultCmd::Register { attrs } => {
                let attrs: BTreeMap<String, String> = attrs.iter().cloned().collect();
                let id = dep.register_master(attrs, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "master={id}");
            }
            VaultCmd::Domain { domain } => {
                dep.register_domain(domain).map_err(deploy_refused)?;
                let _ = writeln!(out, "domain={domain}");
            }
            VaultCmd::Derive { master, domain } => {
                let vid = dep.derive_vid(master, domain).map_err(deploy_refused)?;
                let _ = writeln!(out, "vid={vid}");
            }
            VaultCmd::Alias { master, ttl } => {
                let grant = dep.issue_alias(master, *ttl, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "alias={}", grant.alias_number);
                let _ = writeln!(out, "expires_at={}", grant.expires_at);
            }
            VaultCmd::Route { alias } => {
                dep.route(alias, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "result=ok");
            }
            VaultCmd::Resolve { vid, ticket } => {
                let ticket = ticket.as_deref().map(read_ticket).transpose()?;
                let master = dep.resolve(vid, ticket.as_ref(), now).map_err(deploy_refused)?;
                let _ = writeln!(out, "master={master}");
            }
            VaultCmd::Link { vid, domain, ticket } => {
                let ticket = ticket.as_deref().map(read_ticket).transpose()?;
                let linked = dep.link(vid, domain, ticket.as_ref(), now).map_err(deploy_refused)?;
                let _ = writeln!(out, "vid={linked}");
            }
        },
        Command::Silo(cmd) => match cmd {
            SiloCmd::Create { domain, fields, contact_approved } => {
                let mut schema = SiloSchema::new(domain, fields.iter().map(|(n, c)| (n.as_str(), *c)));
                schema.contact_approved = *contact_approved;
                dep.create_silo(schema).map_err(deploy_refused)?;
                let _ = writeln!(out, "silo={domain}");
            }
            SiloCmd::Put { vid, fields } => {
                let fields: BTreeMap<String, String> = fields.iter().cloned().collect();
                let record = dep.put_record(vid, &fields, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "record={record}");
            }
            SiloCmd::List { domain } => {
                let silo = dep.silo(domain).ok_or_else(|| refused(format!("error=no silo {domain}")))?;
                for (record, vid) in silo.list() {
                    let _ = writeln!(out, "record={record} vid={vid}");
                }
            }
        },
        Command::Purpose(PurposeCmd::Add { code, description }) => {
            dep.register_purpose(code, description.as_deref().unwrap_or(code)).map_err(deploy_refused)?;
            let _ = writeln!(out, "purpose={code}");
        }
        Command::Program(ProgramCmd::Sign { id, artifact, purpose, scope }) => {
            let bytes = read_file(artifact)?;
            let manifest = dep.sign_program(id, &bytes, purpose, scope.clone()).map_err(deploy_refused)?;
            let _ = writeln!(out, "program={id}");
            let _ = writeln!(out, "digest={}", to_hex(&manifest.content_digest));
        }
        Command::Grant { scope, purpose, basis, from, until, grantee } => {
            let from = from.unwrap_or(now);
            let until = until.unwrap_or(from + 1_000_000);
            let auth = dep.grant(grantee, scope.clone(), purpose, *basis, from, until).map_err(deploy_refused)?;
            let _ = writeln!(out, "auth={}", auth.auth_id);
            let _ = writeln!(out, "valid_from={from}");
            let _ = writeln!(out, "valid_until={until}");
        }
        Command::Extend { auth, purpose } => {
            let before = dep.notifier().len();
            let ext = dep.extend_purpose(auth, purpose, now).map_err(deploy_refused)?;
            let _ = writeln!(out, "auth={}", ext.auth_id);
            let _ = writeln!(out, "status={}", ext.status.as_str());
            let _ = writeln!(out, "notified={}", dep.notifier().len() - before);
        }
        Command::Revoke { auth } => {
            let a = dep.revoke(auth).map_err(deploy_refused)?;
            let _ = writeln!(out, "auth={}", a.auth_id);
            let _ = writeln!(out, "status={}", a.status.as_str());
        }
        Command::Consent(cmd) => match cmd {
            ConsentCmd::Give { vid, purpose } => {
                dep.record_consent(vid, purpose, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "consent=live");
            }
            ConsentCmd::Renew { vid, purpose } => {
                dep.renew_consent(vid, purpose, now).map_err(deploy_refused)?;
                let _ = writeln!(out, "consent=renewed");
            }
            ConsentCmd::Optout { vid, purpose } => {
                let (_, obligations) = dep.opt_out(vid, purpose, now).map_err(deploy_refused)?;
                let proofs = dep.process_pending_deletions(now).map_err(deploy_refused)?;
                let _ = writeln!(out, "consent=withdrawn");
                let _ = writeln!(out, "obligations={}", obligations.len());
                for p in proofs {
                    let _ = writeln!(out, "proof={} target={} records={}", to_hex(&p.digest), p.target, p.record_ids.len());
                }
            }
        },
        Command::Submit { auth, program, artifact, subjects, scope, purpose, request_id, ticket_out } => {
            let artifact = read_file(artifact)?;
            let grant = dep.registry().auth(auth).cloned();
            let scope = scope.clone().or_else(|| grant.as_ref().map(|g| g.scope.clone()));
            let purpose = purpose.clone().or_else(|| grant.as_ref().map(|g| g.purpose_code.clone()));
            let (Some(scope), Some(purpose)) = (scope, purpose) else {
                return Err(refused("decision=Deny(Existence)\nreason=unknown authorization; pass --scope and --purpose to submit anyway"));
            };
            let mut nonce = [0u8; 16];
            dep.rng().fill_bytes(&mut nonce);
            let request_id = request_id.clone().unwrap_or_else(|| format!("req-{}", &to_hex(&nonce)[..16]));
            let draft = RequestDraft {
                request_id: request_id.clone(),
                program_id: program.clone(),
                content_digest: sha256(&artifact),
                auth_id: auth.clone(),
                scope,
                subjects: subjects.clone(),
                purpose_code: purpose,
            };
            let signer = dep.controller_signer().clone();
            let request = AccessRequest::sign(draft, &signer, nonce, now);
            let _ = writeln!(out, "request_id={request_id}");
            match dep.submit(&request, now) {
                Ok(ticket) => {
                    let encoded = B64.encode(ticket.to_bytes().into_vec());
                    let _ = writeln!(out, "decision=Allow");
                    let _ = writeln!(out, "ticket_id={}", ticket.ticket_id);
                    let _ = writeln!(out, "expires_at={}", ticket.expires_at);
                    for record in ticket.regulator_shares.keys() {
                        let _ = writeln!(out, "record={record}");
                    }
                    match ticket_out {
                        Some(path) => fs::write(path, format!("{encoded}\n"))
                            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?,
                        None => {
                            let _ = writeln!(out, "ticket={encoded}");
                        }
                    }
                }
                Err(SubmitError::Denied(d)) => return Err(refused(format!("decision={d}"))),
                Err(SubmitError::Protocol(reason)) => return Err(refused(format!("decision=Protocol\nreason={reason}"))),
            }
        }
        Command::Open { ticket, record } => {
            let ticket = read_ticket(ticket)?;
            let share = dep
                .gate()
                .deposit_for(record)
                .and_then(|d| dep.silo(&d.vid.domain))
                .and_then(|s| s.controller_share(record).ok())
                .cloned()
                .unwrap_or(pdgate_core::crypto::KeyShare { share: [0; 32], holder: pdgate_core::crypto::Custodian::Controller });
            let fields = dep.open_record(&ticket, record, &share, now).map_err(|e| refused(format!("error={}", e.as_str())))?;
            let _ = writeln!(out, "record={record}");
            for (name, value) in fields {
                let _ = writeln!(out, "field.{name}={value}");
            }
        }
        Command::Notifications { vid, peek } => {
            let list = if *peek { dep.notifier().mailbox(vid).to_vec() } else { dep.notifier_mut().fetch(vid) };
            let _ = writeln!(out, "count={}", list.len());
            for n in list {
                let _ = writeln!(
                    out,
                    "notification={} request_id={} outcome={} at={} summary={:?}",
                    n.notif_id,
                    n.request_id,
                    n.outcome.as_str(),
                    n.created_at,
                    n.summary
                );
            }
        }
        Command::Init | Command::VerifyLogs { .. } | Command::RunScenario { .. } => unreachable!("handled without state"),
    }
    Ok(())
}
