//! On-disk state directory shared by CLI invocations.
//!
//! Layout:
//!
//! ```text
//! meta.json                      seed, rng epoch, logical clock
//! keys/regulator.key             key_id= / seed= lines
//! keys/controller.key
//! vault.json                     vault snapshot, including its secret
//! registry.log                   one base64 journal entry per line
//! gate.json                      nonces, consumed tickets, regulator deposits
//! silos/<domain>/schema.json
//! silos/<domain>/records/<id>.rec
//! ledgers/regulator.log          one base64 ledger entry per line
//! ledgers/controller.log
//! notifications.json
//! ```
//!
//! Every invocation holds an exclusive lock on `.lock` for its whole run.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use pdgate_core::crypto::{from_hex, to_hex, Role, Signer};
use pdgate_core::gate::{AccessGate, GateSnapshot};
use pdgate_core::ledger::{LedgerPair, LogEntry};
use pdgate_core::notifier::{Notification, Notifier};
use pdgate_core::registry::{JournalEntry, Registry};
use pdgate_core::silo::{Silo, SiloRecord, SiloSchema};
use pdgate_core::vault::{IdentityVault, VaultSnapshot};
use pdgate_core::{Deployment, DeploymentParts, Timestamp};
use rand_chacha::ChaCha20Rng;
use rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STATE_DIR_ENV: &str = "REGCTL_STATE_DIR";
pub const REGULATOR_KEY_ID: &str = "regulator";
pub const CONTROLLER_KEY_ID: &str = "controller";

pub const VAULT_FILE: &str = "vault.json";
pub const REGISTRY_FILE: &str = "registry.log";
pub const GATE_FILE: &str = "gate.json";
pub const NOTIFICATIONS_FILE: &str = "notifications.json";
pub const REGULATOR_LEDGER: &str = "ledgers/regulator.log";
pub const CONTROLLER_LEDGER: &str = "ledgers/controller.log";
const META_FILE: &str = "meta.json";
const LOCK_FILE: &str = ".lock";

pub type Dep = Deployment<ChaCha20Rng>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("{0} is not an initialized state directory (run `regctl init`)")]
    NotInitialized(PathBuf),
    #[error("{0} is already initialized")]
    AlreadyInitialized(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn corrupt(path: impl Into<PathBuf>, reason: impl ToString) -> StoreError {
    StoreError::Corrupt { path: path.into(), reason: reason.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Logical,
    Real,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub seed: u64,
    /// Invocation counter; selects the RNG stream so no two invocations
    /// draw the same bytes.
    pub epoch: u64,
    /// Next logical timestamp.
    pub clock: Timestamp,
    pub clock_mode: ClockMode,
}

impl Meta {
    pub fn rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        rng
    }
}

pub fn real_now() -> Timestamp {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Key file text: `key_id=<id>` and `seed=<hex>` lines.
pub fn render_key(signer: &Signer) -> String {
    format!("key_id={}\nseed={}\n", signer.key_id(), to_hex(&signer.seed()))
}

pub fn parse_key(text: &str, role: Role, path: &Path) -> Result<Signer, StoreError> {
    let mut key_id = None;
    let mut seed = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        match line.split_once('=') {
            Some(("key_id", v)) => key_id = Some(v.trim().to_string()),
            Some(("seed", v)) => seed = from_hex(v.trim()).and_then(|b| <[u8; 32]>::try_from(b).ok()),
            _ => return Err(corrupt(path, format!("unexpected line {line:?}"))),
        }
    }
    match (key_id, seed) {
        (Some(id), Some(seed)) => Ok(Signer::from_seed(id, role, seed)),
        _ => Err(corrupt(path, "key file needs key_id and a 32-byte hex seed")),
    }
}

pub fn read_key(path: &Path, role: Role) -> Result<Signer, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_key(&text, role, path)
}

/// Ledger file body: one base64 entry per line.
pub fn render_ledger(entries: &[LogEntry]) -> Vec<u8> {
    base64_lines(entries.iter().map(|e| e.to_bytes().into_vec()))
}

/// Strict inverse of [`render_ledger`]; any stray byte is an error.
pub fn parse_ledger(raw: &[u8], path: &Path) -> Result<Vec<LogEntry>, StoreError> {
    parse_base64_lines(raw, path)?
        .into_iter()
        .enumerate()
        .map(|(i, bytes)| LogEntry::from_bytes(&bytes).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn base64_lines(items: impl Iterator<Item = Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        out.extend_from_slice(B64.encode(item).as_bytes());
        out.push(b'\n');
    }
    out
}

fn parse_base64_lines(raw: &[u8], path: &Path) -> Result<Vec<Vec<u8>>, StoreError> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let Some(body) = raw.strip_suffix(b"\n") else {
        return Err(corrupt(path, "missing final newline"));
    };
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| B64.decode(line).map_err(|e| corrupt(path, format!("line {}: {e}", i + 1))))
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("state types serialize");
    out.push(b'\n');
    out
}

fn from_json<'a, T: Deserialize<'a>>(raw: &'a [u8], path: &str) -> Result<T, StoreError> {
    serde_json::from_slice(raw).map_err(|e| corrupt(path, e))
}

/// Every persisted service file, keyed by path relative to the state
/// directory. Keys and meta are not included.
pub fn state_files(dep: &Dep) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    files.insert(VAULT_FILE.into(), to_json(&dep.vault().snapshot()));
    files.insert(
        REGISTRY_FILE.into(),
        base64_lines(dep.registry().journal().iter().map(|e| e.to_bytes().into_vec())),
    );
    files.insert(GATE_FILE.into(), to_json(&dep.gate().snapshot()));
    for silo in dep.silos() {
        let dir = format!("silos/{}", silo.domain());
        files.insert(format!("{dir}/schema.json"), to_json(silo.schema()));
        for r in silo.records() {
            files.insert(format!("{dir}/records/{}.rec", r.record_id), r.to_bytes().into_vec());
        }
    }
    files.insert(REGULATOR_LEDGER.into(), render_ledger(dep.ledgers().regulator.ledger().entries()));
    files.insert(CONTROLLER_LEDGER.into(), render_ledger(dep.ledgers().controller.ledger().entries()));
    files.insert(NOTIFICATIONS_FILE.into(), to_json(&dep.notifier().snapshot()));
    files
}

fn required<'a>(files: &'a BTreeMap<String, Vec<u8>>, name: &str) -> Result<&'a [u8], StoreError> {
    files.get(name).map(Vec::as_slice).ok_or_else(|| corrupt(name, "missing"))
}

/// Rebuilds a deployment from [`state_files`] output.
pub fn restore(
    regulator: Signer,
    controller: Signer,
    files: &BTreeMap<String, Vec<u8>>,
    rng: ChaCha20Rng,
) -> Result<Dep, StoreError> {
    let vault: VaultSnapshot = from_json(required(files, VAULT_FILE)?, VAULT_FILE)?;
    let journal = parse_base64_lines(required(files, REGISTRY_FILE)?, Path::new(REGISTRY_FILE))?
        .iter()
        .map(|b| JournalEntry::from_bytes(b).map_err(|e| corrupt(REGISTRY_FILE, e)))
        .collect::<Result<Vec<_>, _>>()?;
    let registry = Registry::replay(regulator.clone(), journal).map_err(|e| corrupt(REGISTRY_FILE, e))?;
    let gate: GateSnapshot = from_json(required(files, GATE_FILE)?, GATE_FILE)?;
    let notifications: Vec<Notification> = from_json(required(files, NOTIFICATIONS_FILE)?, NOTIFICATIONS_FILE)?;
    let reg_entries = parse_ledger(required(files, REGULATOR_LEDGER)?, Path::new(REGULATOR_LEDGER))?;
    let ctl_entries = parse_ledger(required(files, CONTROLLER_LEDGER)?, Path::new(CONTROLLER_LEDGER))?;

    let mut schemas = BTreeMap::new();
    let mut records: BTreeMap<String, Vec<SiloRecord>> = BTreeMap::new();
    for (name, raw) in files {
        let Some(rest) = name.strip_prefix("silos/") else { continue };
        match rest.split('/').collect::<Vec<_>>()[..] {
            [domain, "schema.json"] => {
                schemas.insert(domain.to_string(), from_json::<SiloSchema>(raw, name)?);
            }
            [domain, "records", file] if file.ends_with(".rec") => {
                let record = SiloRecord::from_bytes(raw).map_err(|e| corrupt(name, e))?;
                if format!("{}.rec", record.record_id) != file {
                    return Err(corrupt(name, "record id does not match file name"));
                }
                records.entry(domain.to_string()).or_default().push(record);
            }
            _ => return Err(corrupt(name, "unexpected file")),
        }
    }
    let mut silos = BTreeMap::new();
    for (domain, schema) in schemas {
        let rs = records.remove(&domain).unwrap_or_default();
        let silo = Silo::restore(schema, rs).map_err(|e| corrupt(format!("silos/{domain}"), e))?;
        silos.insert(domain, silo);
    }
    if let Some(domain) = records.keys().next() {
        return Err(corrupt(format!("silos/{domain}"), "records without schema"));
    }

    let parts = DeploymentParts {
        ledgers: LedgerPair::resume(regulator.clone(), controller.clone(), reg_entries, ctl_entries),
        regulator,
        controller,
        vault: IdentityVault::from_snapshot(vault),
        registry,
        gate: AccessGate::from_snapshot(gate),
        silos,
        notifier: Notifier::from_snapshot(notifications),
    };
    Ok(Deployment::from_parts(rng, parts))
}

/// A locked state directory.
pub struct StateDir {
    root: PathBuf,
    _lock: File,
}

/// A loaded deployment plus the invocation's bookkeeping.
pub struct Session {
    pub dep: Dep,
    pub meta: Meta,
    pub now: Timestamp,
}

pub struct KeyPaths {
    pub regulator: Option<PathBuf>,
    pub controller: Option<PathBuf>,
}

impl StateDir {
    fn lock(root: &Path) -> Result<File, StoreError> {
        let path = root.join(LOCK_FILE);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(file)
    }

    /// Creates a fresh deployment. Keys are generated from the seed unless
    /// existing key files are named.
    pub fn init(root: &Path, seed: u64, clock_mode: ClockMode, keys: &KeyPaths) -> Result<(StateDir, Session), StoreError> {
        fs::create_dir_all(root).map_err(io_err(root))?;
        let lock = Self::lock(root)?;
        if root.join(META_FILE).exists() {
            return Err(StoreError::AlreadyInitialized(root.to_path_buf()));
        }
        let meta = Meta { seed, epoch: 0, clock: 0, clock_mode };
        let mut rng = meta.rng();
        let regulator = match &keys.regulator {
            Some(p) => read_key(p, Role::Regulator)?,
            None => Signer::generate(REGULATOR_KEY_ID, Role::Regulator, &mut rng),
        };
        let controller = match &keys.controller {
            Some(p) => read_key(p, Role::Controller)?,
            None => Signer::generate(CONTROLLER_KEY_ID, Role::Controller, &mut rng),
        };
        let dir = StateDir { root: root.to_path_buf(), _lock: lock };
        dir.write("keys/regulator.key", render_key(&regulator).as_bytes())?;
        dir.write("keys/controller.key", render_key(&controller).as_bytes())?;
        let dep = Deployment::new(rng, regulator, controller);
        let now = match clock_mode {
            ClockMode::Logical => 0,
            ClockMode::Real => real_now(),
        };
        Ok((dir, Session { dep, meta, now }))
    }

    pub fn open(root: &Path) -> Result<StateDir, StoreError> {
        if !root.join(META_FILE).is_file() {
            return Err(StoreError::NotInitialized(root.to_path_buf()));
        }
        Ok(StateDir { root: root.to_path_buf(), _lock: Self::lock(root)? })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key_path(&self, role: Role) -> PathBuf {
        match role {
            Role::Regulator => self.root.join("keys/regulator.key"),
            _ => self.root.join("keys/controller.key"),
        }
    }

    /// Loads state for one invocation. `clock` overrides the stored clock
    /// mode; `at` pins the timestamp.
    pub fn load(&self, keys: &KeyPaths, clock: Option<ClockMode>, at: Option<Timestamp>) -> Result<Session, StoreError> {
        let meta_path = self.root.join(META_FILE);
        let mut meta: Meta = from_json(&fs::read(&meta_path).map_err(io_err(&meta_path))?, META_FILE)?;
        meta.epoch += 1;
        if let Some(mode) = clock {
            meta.clock_mode = mode;
        }
        let reg_path = keys.regulator.clone().unwrap_or_else(|| self.key_path(Role::Regulator));
        let ctl_path = keys.controller.clone().unwrap_or_else(|| self.key_path(Role::Controller));
        let regulator = read_key(&reg_path, Role::Regulator)?;
        let controller = read_key(&ctl_path, Role::Controller)?;
        let files = self.read_tree()?;
        let dep = restore(regulator, controller, &files, meta.rng())?;
        let now = at.unwrap_or(match meta.clock_mode {
            ClockMode::Logical => meta.clock,
            ClockMode::Real => real_now(),
        });
        Ok(Session { dep, meta, now })
    }

    fn read_tree(&self) -> Result<BTreeMap<String, Vec<u8>>, StoreError> {
        let mut files = BTreeMap::new();
        for name in [VAULT_FILE, REGISTRY_FILE, GATE_FILE, NOTIFICATIONS_FILE, REGULATOR_LEDGER, CONTROLLER_LEDGER] {
            let path = self.root.join(name);
            files.insert(name.to_string(), fs::read(&path).map_err(io_err(&path))?);
        }
        let silos = self.root.join("silos");
        if silos.is_dir() {
            for domain in sorted_entries(&silos)? {
                let schema = domain.join("schema.json");
                let dname = domain.file_name().unwrap().to_string_lossy().into_owned();
                files.insert(format!("silos/{dname}/schema.json"), fs::read(&schema).map_err(io_err(&schema))?);
                let recs = domain.join("records");
                if recs.is_dir() {
                    for r in sorted_entries(&recs)? {
                        let fname = r.file_name().unwrap().to_string_lossy().into_owned();
                        files.insert(format!("silos/{dname}/records/{fname}"), fs::read(&r).map_err(io_err(&r))?);
                    }
                }
            }
        }
        Ok(files)
    }

    /// Writes the session back. The logical clock advances by one tick per
    /// invocation (past a pinned timestamp, if one was used).
    pub fn save(&self, session: &Session) -> Result<(), StoreError> {
        let files = state_files(&session.dep);
        let existing = self.read_record_paths()?;
        for (name, bytes) in &files {
            self.write(name, bytes)?;
        }
        for stale in existing.iter().filter(|p| !files.contains_key(*p)) {
            let path = self.root.join(stale);
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        let mut meta = session.meta.clone();
        if meta.clock_mode == ClockMode::Logical {
            meta.clock = meta.clock.max(session.now) + 1;
        }
        self.write(META_FILE, &to_json(&meta))
    }

    fn read_record_paths(&self) -> Result<Vec<String>, StoreError> {
        let mut out = Vec::new();
        let silos = self.root.join("silos");
        if !silos.is_dir() {
            return Ok(out);
        }
        for domain in sorted_entries(&silos)? {
            let recs = domain.join("records");
            if recs.is_dir() {
                let dname = domain.file_name().unwrap().to_string_lossy().into_owned();
                for r in sorted_entries(&recs)? {
                    out.push(format!("silos/{dname}/records/{}", r.file_name().unwrap().to_string_lossy()));
                }
            }
        }
        Ok(out)
    }

    /// Atomic replace via a temporary sibling.
    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), StoreError> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let mut out = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    out.sort();
    Ok(out)
}
