//! Signed, hash-chained, cross-committed append-only ledgers.
//!
//! Each party (regulator, controller) keeps its own ledger. Every entry
//! embeds the counterpart's current head hash, so either side truncating,
//! inserting or rewriting history is exposed by [`cross_verify`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::canon::{CanonicalBytes, DecodeError, FieldList, Reader};
use crate::crypto::{chain_hash, sha256, Hash32, Signature, Signer, SigningIdentity, TAG_LOG, ZERO_HASH};
use crate::ids::Timestamp;

const TAG_HEAD: &str = "HEADv1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("counterpart head is stale or was never exchanged")]
    StaleCrossHead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub seq: u64,
    pub prev_hash: Hash32,
    pub payload_digest: Hash32,
    pub cross_head: Hash32,
    pub timestamp: Timestamp,
    pub signer_key_id: String,
    pub signature: Signature,
    /// Canonical event bytes; `payload_digest` is their hash.
    pub payload: Vec<u8>,
}

impl LogEntry {
    /// Bytes covered by the signature and chained into the next entry.
    pub fn signing_bytes(&self) -> CanonicalBytes {
        Self::signing_bytes_of(self.seq, &self.prev_hash, &self.payload_digest, &self.cross_head, self.timestamp)
    }

    fn signing_bytes_of(seq: u64, prev: &Hash32, digest: &Hash32, cross: &Hash32, ts: Timestamp) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.uint(seq).bytes(prev).bytes(digest).bytes(cross).uint(ts);
        list.encode(TAG_LOG)
    }

    pub fn entry_hash(&self) -> Hash32 {
        chain_hash(&self.prev_hash, &self.signing_bytes())
    }

    /// Full persisted form, one per ledger file line.
    pub fn to_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.uint(self.seq)
            .bytes(&self.prev_hash)
            .bytes(&self.payload_digest)
            .bytes(&self.cross_head)
            .uint(self.timestamp)
            .str(&self.signer_key_id)
            .bytes(&self.signature.0)
            .bytes(&self.payload);
        list.encode(TAG_LOG)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_LOG)?;
        let entry = LogEntry {
            seq: r.uint()?,
            prev_hash: r.array()?,
            payload_digest: r.array()?,
            cross_head: r.array()?,
            timestamp: r.uint()?,
            signer_key_id: r.string()?,
            signature: Signature(r.array()?),
            payload: r.bytes()?.to_vec(),
        };
        r.finish()?;
        Ok(entry)
    }
}

/// Signed statement of a ledger's length and last entry hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerHead {
    pub key_id: String,
    /// Number of entries; an empty ledger's head is `ZERO_HASH` at 0.
    pub seq: u64,
    pub head_hash: Hash32,
    pub signature: Signature,
}

impl LedgerHead {
    fn signing_bytes(key_id: &str, seq: u64, head_hash: &Hash32) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.str(key_id).uint(seq).bytes(head_hash);
        list.encode(TAG_HEAD)
    }

    pub fn verify(&self, owner: &SigningIdentity) -> bool {
        self.key_id == owner.key_id
            && owner
                .verify(&Self::signing_bytes(&self.key_id, self.seq, &self.head_hash), &self.signature.0)
                .unwrap_or(false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainStatus {
    Ok,
    BadAt(u64),
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Ok => f.write_str("Ok"),
            ChainStatus::BadAt(seq) => write!(f, "BadAt({seq})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossStatus {
    Ok,
    Divergence { seq_a: u64, seq_b: u64 },
}

impl fmt::Display for CrossStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrossStatus::Ok => f.write_str("Ok"),
            CrossStatus::Divergence { seq_a, seq_b } => write!(f, "Divergence({seq_a}, {seq_b})"),
        }
    }
}

/// Ledger contents plus the identity that signs them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ledger {
    owner: SigningIdentity,
    entries: Vec<LogEntry>,
}

impl Ledger {
    pub fn new(owner: SigningIdentity) -> Self {
        Ledger { owner, entries: Vec::new() }
    }

    /// Wraps entries loaded from storage; nothing is checked until
    /// [`Ledger::verify_chain`].
    pub fn from_entries(owner: SigningIdentity, entries: Vec<LogEntry>) -> Self {
        Ledger { owner, entries }
    }

    pub fn owner(&self) -> &SigningIdentity {
        &self.owner
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head_hash(&self) -> Hash32 {
        self.entries.last().map_or(ZERO_HASH, LogEntry::entry_hash)
    }

    /// Recomputes the chain and every signature; reports the first bad entry.
    pub fn verify_chain(&self) -> ChainStatus {
        let mut prev = ZERO_HASH;
        for (i, entry) in self.entries.iter().enumerate() {
            let ok = entry.seq == i as u64
                && entry.prev_hash == prev
                && entry.payload_digest == sha256(&entry.payload)
                && entry.signer_key_id == self.owner.key_id
                && self.owner.verify(&entry.signing_bytes(), &entry.signature.0).unwrap_or(false);
            if !ok {
                return ChainStatus::BadAt(i as u64);
            }
            prev = entry.entry_hash();
        }
        ChainStatus::Ok
    }

    /// Hash after each prefix length; length 0 maps to `ZERO_HASH`.
    fn prefix_heads(&self) -> BTreeMap<Hash32, u64> {
        let mut heads = BTreeMap::new();
        heads.insert(ZERO_HASH, 0);
        for (i, e) in self.entries.iter().enumerate() {
            heads.insert(e.entry_hash(), i as u64 + 1);
        }
        heads
    }
}

/// First point where two ledgers disagree about their shared history.
///
/// Every `cross_head` must name a real, non-regressing prefix of the other
/// ledger, and both ledgers must record the same payload sequence.
pub fn cross_verify(a: &Ledger, b: &Ledger) -> CrossStatus {
    if let Some(d) = cross_refs(a, b) {
        return d;
    }
    if let Some(CrossStatus::Divergence { seq_a, seq_b }) = cross_refs(b, a) {
        return CrossStatus::Divergence { seq_a: seq_b, seq_b: seq_a };
    }
    let n = a.len().max(b.len());
    for i in 0..n {
        let da = a.entries.get(i).map(|e| e.payload_digest);
        let db = b.entries.get(i).map(|e| e.payload_digest);
        if da != db {
            return CrossStatus::Divergence { seq_a: i as u64, seq_b: i as u64 };
        }
    }
    CrossStatus::Ok
}

fn cross_refs(a: &Ledger, b: &Ledger) -> Option<CrossStatus> {
    let heads = b.prefix_heads();
    let mut floor = 0u64;
    for e in &a.entries {
        match heads.get(&e.cross_head) {
            Some(&k) if k >= floor => floor = k,
            Some(&k) => return Some(CrossStatus::Divergence { seq_a: e.seq, seq_b: k }),
            None => return Some(CrossStatus::Divergence { seq_a: e.seq, seq_b: b.len() as u64 }),
        }
    }
    None
}

/// A party's write handle on its own ledger.
pub struct LedgerWriter {
    ledger: Ledger,
    signer: Signer,
    counterpart: SigningIdentity,
    last_exchanged: Option<(u64, Hash32)>,
}

impl LedgerWriter {
    pub fn new(signer: Signer, counterpart: SigningIdentity) -> Self {
        LedgerWriter {
            ledger: Ledger::new(signer.identity().clone()),
            signer,
            counterpart,
            last_exchanged: None,
        }
    }

    /// Resumes writing after a reload; the last exchanged counterpart head
    /// is recovered from the final entry's cross reference.
    pub fn resume(signer: Signer, counterpart: SigningIdentity, entries: Vec<LogEntry>, counterpart_ledger: &Ledger) -> Self {
        let ledger = Ledger::from_entries(signer.identity().clone(), entries);
        let last_exchanged = ledger
            .entries
            .last()
            .and_then(|e| counterpart_ledger.prefix_heads().get(&e.cross_head).map(|&k| (k, e.cross_head)));
        LedgerWriter { ledger, signer, counterpart, last_exchanged }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn head(&self) -> LedgerHead {
        let seq = self.ledger.len() as u64;
        let head_hash = self.ledger.head_hash();
        let key_id: String = self.signer.key_id().into();
        let signature = self.signer.sign(&LedgerHead::signing_bytes(&key_id, seq, &head_hash));
        LedgerHead { key_id, seq, head_hash, signature }
    }

    pub fn append(&mut self, payload: Vec<u8>, counterpart_head: &LedgerHead, timestamp: Timestamp) -> Result<&LogEntry, LedgerError> {
        if !counterpart_head.verify(&self.counterpart) {
            return Err(LedgerError::StaleCrossHead);
        }
        if let Some((seq, hash)) = self.last_exchanged {
            let regressed =
                counterpart_head.seq < seq || (counterpart_head.seq == seq && counterpart_head.head_hash != hash);
            if regressed {
                return Err(LedgerError::StaleCrossHead);
            }
        }
        let seq = self.ledger.len() as u64;
        let prev_hash = self.ledger.head_hash();
        let payload_digest = sha256(&payload);
        let cross_head = counterpart_head.head_hash;
        let signing = LogEntry::signing_bytes_of(seq, &prev_hash, &payload_digest, &cross_head, timestamp);
        let entry = LogEntry {
            seq,
            prev_hash,
            payload_digest,
            cross_head,
            timestamp,
            signer_key_id: self.signer.key_id().into(),
            signature: self.signer.sign(&signing),
            payload,
        };
        self.last_exchanged = Some((counterpart_head.seq, counterpart_head.head_hash));
        self.ledger.entries.push(entry);
        Ok(self.ledger.entries.last().unwrap())
    }
}

/// The regulator's and controller's ledgers, appended in lockstep.
pub struct LedgerPair {
    pub regulator: LedgerWriter,
    pub controller: LedgerWriter,
}

impl LedgerPair {
    pub fn new(regulator: Signer, controller: Signer) -> Self {
        let reg_id = regulator.identity().clone();
        let ctl_id = controller.identity().clone();
        LedgerPair {
            regulator: LedgerWriter::new(regulator, ctl_id),
            controller: LedgerWriter::new(controller, reg_id),
        }
    }

    pub fn resume(regulator: Signer, controller: Signer, reg_entries: Vec<LogEntry>, ctl_entries: Vec<LogEntry>) -> Self {
        let reg_id = regulator.identity().clone();
        let ctl_id = controller.identity().clone();
        let reg_ledger = Ledger::from_entries(reg_id.clone(), reg_entries.clone());
        let ctl_ledger = Ledger::from_entries(ctl_id.clone(), ctl_entries.clone());
        LedgerPair {
            regulator: LedgerWriter::resume(regulator, ctl_id, reg_entries, &ctl_ledger),
            controller: LedgerWriter::resume(controller, reg_id, ctl_entries, &reg_ledger),
        }
    }

    /// Records one event in both ledgers, regulator first.
    pub fn record(&mut self, payload: &[u8], timestamp: Timestamp) {
        let ctl_head = self.controller.head();
        self.regulator
            .append(payload.to_vec(), &ctl_head, timestamp)
            .expect("own counterpart head is always fresh");
        let reg_head = self.regulator.head();
        self.controller
            .append(payload.to_vec(), &reg_head, timestamp)
            .expect("own counterpart head is always fresh");
    }

    pub fn cross_verify(&self) -> CrossStatus {
        cross_verify(self.regulator.ledger(), self.controller.ledger())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::Role;
    use alloc::vec;

    fn pair() -> LedgerPair {
        LedgerPair::new(
            Signer::from_seed("regulator", Role::Regulator, [1; 32]),
            Signer::from_seed("controller", Role::Controller, [2; 32]),
        )
    }

    fn filled(n: u8) -> LedgerPair {
        let mut p = pair();
        for i in 0..n {
            p.record(&[i; 8], u64::from(i));
        }
        p
    }

    #[test]
    fn genesis_and_chaining() {
        let p = filled(2);
        let e = p.regulator.ledger().entries();
        assert_eq!(e[0].seq, 0);
        assert_eq!(e[0].prev_hash, ZERO_HASH);
        assert_eq!(e[1].seq, 1);
        assert_eq!(e[1].prev_hash, e[0].entry_hash());
        assert_eq!(p.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(p.cross_verify(), CrossStatus::Ok);
    }

    #[test]
    fn empty_ledger_verifies() {
        let p = pair();
        assert_eq!(p.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(p.cross_verify(), CrossStatus::Ok);
    }

    #[test]
    fn fabricated_counterpart_head_is_stale() {
        let mut p = filled(1);
        let mut fake = p.controller.head();
        fake.head_hash = [7; 32];
        assert_eq!(p.regulator.append(vec![1], &fake, 5).unwrap_err(), LedgerError::StaleCrossHead);
    }

    #[test]
    fn regressed_counterpart_head_is_stale() {
        let mut p = filled(0);
        let old = p.controller.head();
        p.record(b"x", 1);
        p.record(b"y", 2);
        assert_eq!(p.regulator.append(vec![1], &old, 5).unwrap_err(), LedgerError::StaleCrossHead);
    }

    #[test]
    fn controller_truncation_detected() {
        let p = filled(5);
        let mut entries = p.controller.ledger().entries().to_vec();
        entries.pop();
        let truncated = Ledger::from_entries(p.controller.ledger().owner().clone(), entries);
        assert_eq!(truncated.verify_chain(), ChainStatus::Ok);
        assert!(matches!(cross_verify(p.regulator.ledger(), &truncated), CrossStatus::Divergence { .. }));
    }

    #[test]
    fn regulator_truncation_detected() {
        let p = filled(5);
        let mut entries = p.regulator.ledger().entries().to_vec();
        entries.pop();
        let truncated = Ledger::from_entries(p.regulator.ledger().owner().clone(), entries);
        assert!(matches!(cross_verify(&truncated, p.controller.ledger()), CrossStatus::Divergence { .. }));
    }

    #[test]
    fn unilateral_insertion_detected() {
        let mut p = filled(3);
        let head = p.controller.head();
        p.regulator.append(b"fabricated".to_vec(), &head, 99).unwrap();
        assert_eq!(p.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(p.cross_verify(), CrossStatus::Divergence { seq_a: 3, seq_b: 3 });
    }

    #[test]
    fn persisted_form_round_trips() {
        let p = filled(3);
        let reloaded: Vec<LogEntry> = p
            .regulator
            .ledger()
            .entries()
            .iter()
            .map(|e| LogEntry::from_bytes(e.to_bytes().as_bytes()).unwrap())
            .collect();
        let ledger = Ledger::from_entries(p.regulator.ledger().owner().clone(), reloaded);
        assert_eq!(&ledger, p.regulator.ledger());
        assert_eq!(ledger.verify_chain(), ChainStatus::Ok);
    }

    #[test]
    fn resumed_pair_continues_consistently() {
        let p = filled(3);
        let mut resumed = LedgerPair::resume(
            Signer::from_seed("regulator", Role::Regulator, [1; 32]),
            Signer::from_seed("controller", Role::Controller, [2; 32]),
            p.regulator.ledger().entries().to_vec(),
            p.controller.ledger().entries().to_vec(),
        );
        resumed.record(b"after reload", 10);
        assert_eq!(resumed.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(resumed.cross_verify(), CrossStatus::Ok);

        let stale = LedgerPair::new(
            Signer::from_seed("regulator", Role::Regulator, [1; 32]),
            Signer::from_seed("controller", Role::Controller, [2; 32]),
        )
        .controller
        .head();
        assert_eq!(resumed.regulator.append(vec![0], &stale, 11).unwrap_err(), LedgerError::StaleCrossHead);
    }
}
