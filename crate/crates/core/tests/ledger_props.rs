//! Tamper evidence of ledger pairs under every single-entry mutation,
//! deletion and reordering of short ledgers.

use proptest::prelude::*;

use pdgate_core::crypto::{Role, Signer};
use pdgate_core::ledger::{cross_verify, ChainStatus, CrossStatus, Ledger, LedgerPair, LogEntry};

fn pair(n: usize) -> LedgerPair {
    let mut p = LedgerPair::new(
        Signer::from_seed("regulator", Role::Regulator, [1; 32]),
        Signer::from_seed("controller", Role::Controller, [2; 32]),
    );
    for i in 0..n {
        p.record(format!("event {i}").as_bytes(), i as u64);
    }
    p
}

fn detected(p: &LedgerPair, reg: Vec<LogEntry>, ctl: Vec<LogEntry>) -> bool {
    let r = Ledger::from_entries(p.regulator.ledger().owner().clone(), reg);
    let c = Ledger::from_entries(p.controller.ledger().owner().clone(), ctl);
    r.verify_chain() != ChainStatus::Ok || c.verify_chain() != ChainStatus::Ok || cross_verify(&r, &c) != CrossStatus::Ok
}

fn mutate(e: &mut LogEntry, field: usize) {
    match field {
        0 => e.seq ^= 1,
        1 => e.prev_hash[0] ^= 1,
        2 => e.payload_digest[5] ^= 1,
        3 => e.cross_head[31] ^= 1,
        4 => e.timestamp += 1,
        5 => e.signer_key_id.push('x'),
        6 => e.signature.0[10] ^= 1,
        _ => e.payload.push(0),
    }
}

#[test]
fn honest_pairs_verify() {
    for n in [0, 1, 10, 50] {
        let p = pair(n);
        assert_eq!(p.regulator.ledger().verify_chain(), ChainStatus::Ok);
        assert_eq!(p.cross_verify(), CrossStatus::Ok);
    }
}

#[test]
fn every_field_mutation_of_every_entry_is_detected() {
    let p = pair(10);
    for side in 0..2 {
        for i in 0..10 {
            for field in 0..8 {
                let mut reg = p.regulator.ledger().entries().to_vec();
                let mut ctl = p.controller.ledger().entries().to_vec();
                let target = if side == 0 { &mut reg } else { &mut ctl };
                mutate(&mut target[i], field);
                assert!(detected(&p, reg, ctl), "side {side} entry {i} field {field}");
            }
        }
    }
}

#[test]
fn every_deletion_and_adjacent_swap_is_detected() {
    let p = pair(10);
    for side in 0..2 {
        for i in 0..10 {
            let mut reg = p.regulator.ledger().entries().to_vec();
            let mut ctl = p.controller.ledger().entries().to_vec();
            let target = if side == 0 { &mut reg } else { &mut ctl };
            target.remove(i);
            assert!(detected(&p, reg, ctl), "delete side {side} entry {i}");
        }
        for i in 0..9 {
            let mut reg = p.regulator.ledger().entries().to_vec();
            let mut ctl = p.controller.ledger().entries().to_vec();
            let target = if side == 0 { &mut reg } else { &mut ctl };
            target.swap(i, i + 1);
            assert!(detected(&p, reg, ctl), "swap side {side} entries {i},{}", i + 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn persisted_ledgers_reload_identically(n in 0usize..12) {
        let p = pair(n);
        let lines: Vec<Vec<u8>> = p.regulator.ledger().entries().iter().map(|e| e.to_bytes().into_vec()).collect();
        let reloaded: Vec<LogEntry> = lines.iter().map(|l| LogEntry::from_bytes(l).unwrap()).collect();
        let l = Ledger::from_entries(p.regulator.ledger().owner().clone(), reloaded);
        prop_assert_eq!(l.verify_chain(), p.regulator.ledger().verify_chain());
        prop_assert_eq!(&l, p.regulator.ledger());
    }

    #[test]
    fn any_permutation_other_than_identity_is_detected(n in 2usize..10, perm_seed in any::<u64>()) {
        let p = pair(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assume!(order.iter().enumerate().any(|(i, &j)| i != j));
        let entries = p.controller.ledger().entries();
        let shuffled: Vec<LogEntry> = order.iter().map(|&i| entries[i].clone()).collect();
        prop_assert!(detected(&p, p.regulator.ledger().entries().to_vec(), shuffled));
    }
}
