//! Central identity vault: master records, per-domain virtual identifiers,
//! time-limited alias numbers, and ticket-gated resolution and linking.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::FieldList;
use crate::crypto::{prf_derive, sha256, Hash32, SigningIdentity};
use crate::gate::{AccessTicket, TicketError};
use crate::ids::{MasterId, Operation, Timestamp, VirtualId};

/// Domain the registry uses to address subjects in consent records.
pub const CONSENT_DOMAIN: &str = "consent";
pub const MAX_DOMAIN_LEN: usize = 12;
pub const ALIAS_PREFIX: &str = "99";
pub const REAL_PHONE_ATTR: &str = "real_phone";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VaultError {
    #[error("master record needs at least one attribute")]
    EmptyAttributes,
    #[error("identical attribute set already registered")]
    DuplicateMaster,
    #[error("not found")]
    NotFound,
    #[error("domain {0:?} is not registered")]
    DomainUnregistered(String),
    #[error("domain {0:?} already registered")]
    DuplicateDomain(String),
    #[error("invalid domain name {0:?}")]
    InvalidDomain(String),
    #[error("unauthorized: {0}")]
    Unauthorized(Unauthorized),
    #[error("master has no {REAL_PHONE_ATTR} attribute")]
    NoPhone,
    #[error("ttl must be positive")]
    InvalidTtl,
    #[error("alias expired")]
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum Unauthorized {
    #[error("no ticket presented")]
    NoTicket,
    #[error("ticket: {0}")]
    Ticket(TicketError),
    #[error("ticket does not grant this operation")]
    Operation,
    #[error("ticket does not cover the domain")]
    Domain,
    #[error("ticket does not name the subject")]
    Subject,
    #[error("ticket already used for this subject")]
    Consumed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasterRecord {
    pub master_id: MasterId,
    pub attributes: BTreeMap<String, String>,
    pub created_at: Timestamp,
}

/// Stored derivation of a virtual identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VidBinding {
    pub vid: VirtualId,
    pub master_id: MasterId,
    pub derivation_counter: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasGrant {
    pub alias_number: String,
    pub real_number: String,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
}

impl AliasGrant {
    pub fn is_active(&self, at: Timestamp) -> bool {
        self.issued_at <= at && at < self.expires_at
    }
}

#[derive(Default)]
struct DomainTable {
    by_master: BTreeMap<MasterId, VidBinding>,
    by_vid: BTreeMap<u64, MasterId>,
}

/// Serializable vault contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaultSnapshot {
    pub secret: [u8; 32],
    pub domains: Vec<String>,
    pub masters: Vec<MasterRecord>,
    pub bindings: Vec<VidBinding>,
    pub aliases: Vec<(AliasGrant, MasterId)>,
    pub consumed: Vec<(String, VirtualId)>,
}

pub fn validate_domain(domain: &str) -> Result<(), VaultError> {
    let ok = !domain.is_empty()
        && domain.len() <= MAX_DOMAIN_LEN
        && domain.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
    if ok {
        Ok(())
    } else {
        Err(VaultError::InvalidDomain(domain.into()))
    }
}

/// The pure derivation: first 8 PRF bytes, big-endian, mod 10^20.
pub fn compute_vid(secret: &[u8; 32], master: &MasterId, domain: &str, counter: u64) -> u64 {
    let mut message = [0u8; 24];
    message[..16].copy_from_slice(&master.0);
    message[16..].copy_from_slice(&counter.to_be_bytes());
    let tag = prf_derive(secret, &format!("VID|{domain}"), &message)
        .expect("validated domain names yield valid PRF tags");
    let head = u64::from_be_bytes(tag[..8].try_into().unwrap());
    (u128::from(head) % 100_000_000_000_000_000_000u128) as u64
}

fn attribute_digest(attributes: &BTreeMap<String, String>) -> Hash32 {
    let mut list = FieldList::new();
    for (k, v) in attributes {
        list.str(k).str(v);
    }
    sha256(list.encode("ATTRv1").as_bytes())
}

pub struct IdentityVault {
    secret: [u8; 32],
    masters: BTreeMap<MasterId, MasterRecord>,
    attribute_index: BTreeSet<Hash32>,
    domains: BTreeMap<String, DomainTable>,
    aliases: BTreeMap<String, (AliasGrant, MasterId)>,
    consumed: BTreeSet<(String, VirtualId)>,
}

impl IdentityVault {
    pub fn new(secret: [u8; 32]) -> Self {
        let mut vault = IdentityVault {
            secret,
            masters: BTreeMap::new(),
            attribute_index: BTreeSet::new(),
            domains: BTreeMap::new(),
            aliases: BTreeMap::new(),
            consumed: BTreeSet::new(),
        };
        vault.domains.insert(CONSENT_DOMAIN.into(), DomainTable::default());
        vault
    }

    pub fn register_domain(&mut self, domain: &str) -> Result<(), VaultError> {
        validate_domain(domain)?;
        if self.domains.contains_key(domain) {
            return Err(VaultError::DuplicateDomain(domain.into()));
        }
        self.domains.insert(domain.into(), DomainTable::default());
        Ok(())
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domains.contains_key(domain)
    }

    pub fn register_master<R: RngCore + CryptoRng>(
        &mut self,
        attributes: BTreeMap<String, String>,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<MasterId, VaultError> {
        if attributes.is_empty() {
            return Err(VaultError::EmptyAttributes);
        }
        let digest = attribute_digest(&attributes);
        if self.attribute_index.contains(&digest) {
            return Err(VaultError::DuplicateMaster);
        }
        let master_id = loop {
            let mut raw = [0u8; 16];
            rng.fill_bytes(&mut raw);
            let id = MasterId(raw);
            if !self.masters.contains_key(&id) {
                break id;
            }
        };
        self.attribute_index.insert(digest);
        self.masters.insert(master_id, MasterRecord { master_id, attributes, created_at: now });
        Ok(master_id)
    }

    pub fn contains_master(&self, master: &MasterId) -> bool {
        self.masters.contains_key(master)
    }

    pub fn master_ids(&self) -> impl Iterator<Item = &MasterId> {
        self.masters.keys()
    }

    /// Idempotent: the stored identifier is returned on repeat calls.
    pub fn derive_vid(&mut self, master: &MasterId, domain: &str) -> Result<VirtualId, VaultError> {
        if !self.masters.contains_key(master) {
            return Err(VaultError::NotFound);
        }
        let table = self
            .domains
            .get_mut(domain)
            .ok_or_else(|| VaultError::DomainUnregistered(domain.into()))?;
        if let Some(binding) = table.by_master.get(master) {
            return Ok(binding.vid.clone());
        }
        let mut counter = 0u64;
        let vid = loop {
            let candidate = compute_vid(&self.secret, master, domain, counter);
            if !table.by_vid.contains_key(&candidate) {
                break candidate;
            }
            counter += 1;
        };
        let vid = VirtualId::new(domain, vid);
        table.by_vid.insert(vid.vid, *master);
        table.by_master.insert(*master, VidBinding { vid: vid.clone(), master_id: *master, derivation_counter: counter });
        Ok(vid)
    }

    pub fn vid_exists(&self, vid: &VirtualId) -> bool {
        self.domains.get(&vid.domain).is_some_and(|t| t.by_vid.contains_key(&vid.vid))
    }

    fn master_of(&self, vid: &VirtualId) -> Option<MasterId> {
        self.domains.get(&vid.domain)?.by_vid.get(&vid.vid).copied()
    }

    /// Subject's address in the consent domain. Used only on the
    /// regulator side to evaluate consent; never returned to controllers.
    pub fn consent_subject(&mut self, vid: &VirtualId) -> Result<VirtualId, VaultError> {
        if vid.domain == CONSENT_DOMAIN {
            return if self.vid_exists(vid) { Ok(vid.clone()) } else { Err(VaultError::NotFound) };
        }
        let master = self.master_of(vid).ok_or(VaultError::NotFound)?;
        self.derive_vid(&master, CONSENT_DOMAIN)
    }

    /// All stored identifiers of the subject behind `vid`, outside the consent domain.
    pub fn subject_vids(&self, vid: &VirtualId) -> Vec<VirtualId> {
        let Some(master) = self.master_of(vid) else { return Vec::new() };
        self.domains
            .iter()
            .filter(|(d, _)| d.as_str() != CONSENT_DOMAIN)
            .filter_map(|(_, t)| t.by_master.get(&master).map(|b| b.vid.clone()))
            .collect()
    }

    fn authorize(
        &mut self,
        ticket: Option<&AccessTicket>,
        regulator: &SigningIdentity,
        operation: Operation,
        subject: &VirtualId,
        domains: &[&str],
        now: Timestamp,
    ) -> Result<(), Unauthorized> {
        let ticket = ticket.ok_or(Unauthorized::NoTicket)?;
        ticket.validate(regulator, now).map_err(Unauthorized::Ticket)?;
        if ticket.granted_scope.operation != operation {
            return Err(Unauthorized::Operation);
        }
        if !domains.iter().all(|d| ticket.granted_scope.domains.contains(*d)) {
            return Err(Unauthorized::Domain);
        }
        if !ticket.subjects.contains(subject) {
            return Err(Unauthorized::Subject);
        }
        let key = (ticket.ticket_id.clone(), subject.clone());
        if self.consumed.contains(&key) {
            return Err(Unauthorized::Consumed);
        }
        self.consumed.insert(key);
        Ok(())
    }

    pub fn resolve(
        &mut self,
        vid: &VirtualId,
        ticket: Option<&AccessTicket>,
        regulator: &SigningIdentity,
        now: Timestamp,
    ) -> Result<MasterId, VaultError> {
        self.authorize(ticket, regulator, Operation::Resolve, vid, &[vid.domain.as_str()], now)
            .map_err(VaultError::Unauthorized)?;
        self.master_of(vid).ok_or(VaultError::NotFound)
    }

    pub fn link(
        &mut self,
        vid: &VirtualId,
        target_domain: &str,
        ticket: Option<&AccessTicket>,
        regulator: &SigningIdentity,
        now: Timestamp,
    ) -> Result<VirtualId, VaultError> {
        self.authorize(ticket, regulator, Operation::Link, vid, &[vid.domain.as_str(), target_domain], now)
            .map_err(VaultError::Unauthorized)?;
        if target_domain == CONSENT_DOMAIN {
            return Err(VaultError::Unauthorized(Unauthorized::Domain));
        }
        let master = self.master_of(vid).ok_or(VaultError::NotFound)?;
        self.derive_vid(&master, target_domain)
    }

    pub fn issue_alias<R: RngCore + CryptoRng>(
        &mut self,
        master: &MasterId,
        ttl_seconds: u64,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<AliasGrant, VaultError> {
        if ttl_seconds == 0 {
            return Err(VaultError::InvalidTtl);
        }
        let record = self.masters.get(master).ok_or(VaultError::NotFound)?;
        let real_number = record.attributes.get(REAL_PHONE_ATTR).ok_or(VaultError::NoPhone)?.clone();
        let alias_number = loop {
            let candidate = format!("{ALIAS_PREFIX}{:08}", rng.next_u64() % 100_000_000);
            match self.aliases.get(&candidate) {
                Some((grant, _)) if grant.expires_at > now => continue,
                _ => break candidate,
            }
        };
        let grant = AliasGrant {
            alias_number: alias_number.clone(),
            real_number,
            issued_at: now,
            expires_at: now.saturating_add(ttl_seconds),
        };
        self.aliases.insert(alias_number, (grant.clone(), *master));
        Ok(grant)
    }

    /// Real number behind an alias while `issued_at <= at < expires_at`.
    pub fn route(&self, alias_number: &str, at: Timestamp) -> Result<&str, VaultError> {
        let (grant, _) = self.aliases.get(alias_number).ok_or(VaultError::NotFound)?;
        if grant.is_active(at) {
            Ok(&grant.real_number)
        } else {
            Err(VaultError::Expired)
        }
    }

    /// Every attribute value held for any master; used to plant and scan sentinels.
    pub fn attribute_values(&self) -> impl Iterator<Item = &str> {
        self.masters.values().flat_map(|m| m.attributes.values().map(String::as_str))
    }

    pub fn snapshot(&self) -> VaultSnapshot {
        VaultSnapshot {
            secret: self.secret,
            domains: self.domains.keys().cloned().collect(),
            masters: self.masters.values().cloned().collect(),
            bindings: self.domains.values().flat_map(|t| t.by_master.values().cloned()).collect(),
            aliases: self.aliases.values().cloned().collect(),
            consumed: self.consumed.iter().cloned().collect(),
        }
    }

    pub fn from_snapshot(snapshot: VaultSnapshot) -> Self {
        let mut vault = IdentityVault::new(snapshot.secret);
        for d in snapshot.domains {
            vault.domains.entry(d).or_default();
        }
        for m in snapshot.masters {
            vault.attribute_index.insert(attribute_digest(&m.attributes));
            vault.masters.insert(m.master_id, m);
        }
        for b in snapshot.bindings {
            let table = vault.domains.entry(b.vid.domain.clone()).or_default();
            table.by_vid.insert(b.vid.vid, b.master_id);
            table.by_master.insert(b.master_id, b);
        }
        for (grant, master) in snapshot.aliases {
            vault.aliases.insert(grant.alias_number.clone(), (grant, master));
        }
        vault.consumed = snapshot.consumed.into_iter().collect();
        vault
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn attrs(name: &str) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("name".into(), name.into());
        m.insert(REAL_PHONE_ATTR.into(), format!("555{:07}", name.len()));
        m
    }

    fn vault() -> (IdentityVault, ChaCha20Rng) {
        let mut v = IdentityVault::new([3; 32]);
        v.register_domain("health").unwrap();
        v.register_domain("tax").unwrap();
        (v, ChaCha20Rng::seed_from_u64(1))
    }

    #[test]
    fn registration_uniqueness_and_duplicates() {
        let (mut v, mut rng) = vault();
        let a = v.register_master(attrs("alice"), 0, &mut rng).unwrap();
        let b = v.register_master(attrs("bob"), 0, &mut rng).unwrap();
        assert_ne!(a, b);
        assert_eq!(v.register_master(attrs("alice"), 1, &mut rng), Err(VaultError::DuplicateMaster));
        assert_eq!(v.register_master(BTreeMap::new(), 1, &mut rng), Err(VaultError::EmptyAttributes));
    }

    #[test]
    fn derive_is_idempotent_and_domain_separated() {
        let (mut v, mut rng) = vault();
        let a = v.register_master(attrs("alice"), 0, &mut rng).unwrap();
        let h1 = v.derive_vid(&a, "health").unwrap();
        let h2 = v.derive_vid(&a, "health").unwrap();
        let t = v.derive_vid(&a, "tax").unwrap();
        assert_eq!(h1, h2);
        assert_ne!(h1.vid, t.vid);
        assert_eq!(h1.vid, compute_vid(&[3; 32], &a, "health", 0));
        assert_eq!(v.derive_vid(&MasterId([0; 16]), "tax"), Err(VaultError::NotFound));
        assert_eq!(v.derive_vid(&a, "edu"), Err(VaultError::DomainUnregistered("edu".into())));
    }

    #[test]
    fn domain_names_are_validated() {
        let (mut v, _) = vault();
        assert!(matches!(v.register_domain("Health"), Err(VaultError::InvalidDomain(_))));
        assert!(matches!(v.register_domain("averyverylongdomain"), Err(VaultError::InvalidDomain(_))));
        assert!(matches!(v.register_domain("tax"), Err(VaultError::DuplicateDomain(_))));
    }

    #[test]
    fn alias_window_is_half_open() {
        let (mut v, mut rng) = vault();
        let a = v.register_master(attrs("alice"), 0, &mut rng).unwrap();
        let g = v.issue_alias(&a, 30, 100, &mut rng).unwrap();
        assert!(g.alias_number.starts_with("99") && g.alias_number.len() == 10);
        assert_eq!(v.route(&g.alias_number, 100).unwrap(), g.real_number);
        assert_eq!(v.route(&g.alias_number, 129).unwrap(), g.real_number);
        assert_eq!(v.route(&g.alias_number, 130), Err(VaultError::Expired));
        assert_eq!(v.route("9900000000", 100), Err(VaultError::NotFound));
        let g2 = v.issue_alias(&a, 30, 101, &mut rng).unwrap();
        assert_ne!(g.alias_number, g2.alias_number);
        assert_eq!(v.route(&g2.alias_number, 110).unwrap(), v.route(&g.alias_number, 110).unwrap());
        assert_eq!(v.issue_alias(&a, 0, 100, &mut rng), Err(VaultError::InvalidTtl));
    }

    #[test]
    fn alias_needs_phone() {
        let (mut v, mut rng) = vault();
        let mut m = BTreeMap::new();
        m.insert("name".into(), "carol".into());
        let c = v.register_master(m, 0, &mut rng).unwrap();
        assert_eq!(v.issue_alias(&c, 10, 0, &mut rng), Err(VaultError::NoPhone));
    }

    #[test]
    fn resolve_without_ticket_is_unauthorized() {
        let (mut v, mut rng) = vault();
        let a = v.register_master(attrs("alice"), 0, &mut rng).unwrap();
        let h = v.derive_vid(&a, "health").unwrap();
        let reg = crate::crypto::Signer::from_seed("reg", crate::crypto::Role::Regulator, [1; 32]);
        assert_eq!(
            v.resolve(&h, None, reg.identity(), 0),
            Err(VaultError::Unauthorized(Unauthorized::NoTicket))
        );
        assert_eq!(
            v.link(&h, "tax", None, reg.identity(), 0),
            Err(VaultError::Unauthorized(Unauthorized::NoTicket))
        );
    }

    #[test]
    fn snapshot_round_trip_preserves_vids() {
        let (mut v, mut rng) = vault();
        let a = v.register_master(attrs("alice"), 0, &mut rng).unwrap();
        let h = v.derive_vid(&a, "health").unwrap();
        let mut restored = IdentityVault::from_snapshot(v.snapshot());
        assert_eq!(restored.derive_vid(&a, "health").unwrap(), h);
        assert_eq!(restored.snapshot(), v.snapshot());
        assert_eq!(restored.register_master(attrs("alice"), 0, &mut rng), Err(VaultError::DuplicateMaster));
    }
}
