//! Cross-silo linkage adversary.
//!
//! The adversary sees only what the silos store: per-domain identifiers,
//! creation times and ciphertext sizes. It pairs records across two domains
//! by ranking both sides on one observable and matching equal ranks, and we
//! keep the best of its strategies. A control adversary that also holds the
//! vault secret re-derives every identifier and should link everything.

use std::collections::BTreeMap;

use pdgate_core::vault::compute_vid;
use pdgate_core::{MasterId, Timestamp};
use thiserror::Error;

use crate::store::Dep;

pub const MIN_SUBJECTS: usize = 20;
pub const MIN_DOMAINS: usize = 2;
/// Derivation counters the control adversary tries per domain.
const CONTROL_COUNTERS: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkageError {
    #[error("InsufficientPopulation: {subjects} subjects over {domains} domains (need {MIN_SUBJECTS} and {MIN_DOMAINS})")]
    InsufficientPopulation { subjects: usize, domains: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibleRecord {
    pub record_id: String,
    pub vid: u64,
    pub created_at: Timestamp,
    pub ciphertext_len: usize,
}

/// Silo-visible state per domain.
pub type SiloView = BTreeMap<String, Vec<VisibleRecord>>;

/// Ground truth: for each subject, its identifier in each domain.
pub type Truth = Vec<BTreeMap<String, u64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    VidOrder,
    CreationOrder,
    CiphertextLength,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::VidOrder, Strategy::CreationOrder, Strategy::CiphertextLength];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::VidOrder => "vid_order",
            Strategy::CreationOrder => "creation_order",
            Strategy::CiphertextLength => "ciphertext_length",
        }
    }
}

pub fn silo_view(dep: &Dep, domains: &[String]) -> SiloView {
    domains
        .iter()
        .map(|d| {
            let records = dep
                .silo(d)
                .map(|s| {
                    s.records()
                        .map(|r| VisibleRecord {
                            record_id: r.record_id.clone(),
                            vid: r.vid.vid,
                            created_at: r.created_at,
                            ciphertext_len: r.ciphertext.len(),
                        })
                        .collect()
                })
                .unwrap_or_default();
            (d.clone(), records)
        })
        .collect()
}

/// Ground truth read from the vault for the given masters.
pub fn truth_from_vault(dep: &Dep, masters: &[MasterId], domains: &[String]) -> Truth {
    let bindings = dep.vault().snapshot().bindings;
    masters
        .iter()
        .map(|m| {
            bindings
                .iter()
                .filter(|b| &b.master_id == m && domains.contains(&b.vid.domain))
                .map(|b| (b.vid.domain.clone(), b.vid.vid))
                .collect()
        })
        .collect()
}

fn ranked(records: &[VisibleRecord], strategy: Strategy) -> Vec<u64> {
    let mut rs: Vec<&VisibleRecord> = records.iter().collect();
    match strategy {
        Strategy::VidOrder => rs.sort_by_key(|r| r.vid),
        Strategy::CreationOrder => rs.sort_by(|a, b| (a.created_at, &a.record_id).cmp(&(b.created_at, &b.record_id))),
        Strategy::CiphertextLength => {
            rs.sort_by(|a, b| (a.ciphertext_len, &a.record_id).cmp(&(b.ciphertext_len, &b.record_id)))
        }
    }
    rs.into_iter().map(|r| r.vid).collect()
}

/// The adversary's guess: identifier in `a` to identifier in `b`.
pub fn rank_match(a: &[VisibleRecord], b: &[VisibleRecord], strategy: Strategy) -> BTreeMap<u64, u64> {
    ranked(a, strategy).into_iter().zip(ranked(b, strategy)).collect()
}

/// Fraction of true pairs the guess gets right. Empty truth scores 0.
pub fn matching_accuracy(guess: &BTreeMap<u64, u64>, truth: &[(u64, u64)]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = truth.iter().filter(|(a, b)| guess.get(a) == Some(b)).count();
    hits as f64 / truth.len() as f64
}

fn pairs_between(truth: &Truth, a: &str, b: &str) -> Vec<(u64, u64)> {
    truth.iter().filter_map(|t| Some((*t.get(a)?, *t.get(b)?))).collect()
}

fn domain_pairs(view: &SiloView) -> Vec<(&String, &String)> {
    let ds: Vec<&String> = view.keys().collect();
    let mut out = Vec::new();
    for (i, a) in ds.iter().enumerate() {
        for b in &ds[i + 1..] {
            out.push((*a, *b));
        }
    }
    out
}

/// Mean accuracy of one strategy over all domain pairs, without the
/// population precondition.
pub fn strategy_accuracy(view: &SiloView, truth: &Truth, strategy: Strategy) -> f64 {
    let pairs = domain_pairs(view);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(a, b)| matching_accuracy(&rank_match(&view[*a], &view[*b], strategy), &pairs_between(truth, a, b)))
        .sum();
    total / pairs.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkageReport {
    pub subjects: usize,
    pub domains: usize,
    pub per_strategy: Vec<(Strategy, f64)>,
    /// Best strategy's accuracy.
    pub accuracy: f64,
    pub baseline: f64,
}

/// Best accuracy the silo-only adversary achieves.
pub fn adversary_link_accuracy(view: &SiloView, truth: &Truth) -> Result<LinkageReport, LinkageError> {
    let (subjects, domains) = (truth.len(), view.len());
    if subjects < MIN_SUBJECTS || domains < MIN_DOMAINS {
        return Err(LinkageError::InsufficientPopulation { subjects, domains });
    }
    let per_strategy: Vec<(Strategy, f64)> =
        Strategy::ALL.iter().map(|s| (*s, strategy_accuracy(view, truth, *s))).collect();
    let accuracy = per_strategy.iter().map(|(_, a)| *a).fold(0.0, f64::max);
    Ok(LinkageReport { subjects, domains, per_strategy, accuracy, baseline: 1.0 / subjects as f64 })
}

/// Accuracy of an adversary holding the vault secret and the master list:
/// it recomputes identifiers instead of guessing.
pub fn control_link_accuracy(secret: &[u8; 32], masters: &[MasterId], view: &SiloView, truth: &Truth) -> f64 {
    let owner_in = |domain: &str, vid: u64| -> Option<&MasterId> {
        masters.iter().find(|m| (0..CONTROL_COUNTERS).any(|c| compute_vid(secret, m, domain, c) == vid))
    };
    let owners: BTreeMap<&String, BTreeMap<u64, &MasterId>> = view
        .iter()
        .map(|(d, rs)| (d, rs.iter().filter_map(|r| Some((r.vid, owner_in(d, r.vid)?))).collect()))
        .collect();
    let pairs = domain_pairs(view);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|(a, b)| {
            let by_master: BTreeMap<&MasterId, u64> = owners[b].iter().map(|(v, m)| (*m, *v)).collect();
            let guess: BTreeMap<u64, u64> =
                owners[a].iter().filter_map(|(v, m)| Some((*v, *by_master.get(m)?))).collect();
            matching_accuracy(&guess, &pairs_between(truth, a, b))
        })
        .sum();
    total / pairs.len() as f64
}
