use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use regctl::harness::{self, scan};
use regctl::linkage::LinkageError;
use regctl::scenario::{load_scenario, parse_scenario, AttackKind, Keyword, Scenario, ScenarioError, Step};

fn committed() -> Vec<PathBuf> {
    let dir = PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios"));
    let mut files: Vec<PathBuf> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "scenario")).collect();
    files.sort();
    files
}

#[test]
fn committed_scenarios_pass_and_cover_every_attack() {
    let mut caught = BTreeSet::new();
    for path in committed() {
        let scenario = load_scenario(&path).unwrap();
        let report = harness::run(&scenario, None);
        assert!(report.passed(), "{}:\n{}", path.display(), report.render());
        for a in &report.attacks {
            assert!(a.caught, "{}: {a:?}", path.display());
            caught.insert(a.kind);
        }
    }
    assert_eq!(caught, AttackKind::ALL.into_iter().collect());
}

#[test]
fn reports_are_deterministic() {
    for path in committed() {
        let scenario = load_scenario(&path).unwrap();
        assert_eq!(harness::run(&scenario, None).render(), harness::run(&scenario, None).render(), "{}", path.display());
    }
}

#[test]
fn seed_changes_the_run() {
    let scenario = load_scenario(&committed().into_iter().find(|p| p.ends_with("honest.scenario")).unwrap()).unwrap();
    let a = harness::run(&scenario, Some(1));
    let b = harness::run(&scenario, Some(2));
    assert!(a.passed() && b.passed());
    assert_ne!(a.render(), b.render());
}

#[test]
fn empty_scenario_runs_trivially() {
    let scenario = parse_scenario("").unwrap();
    assert!(scenario.steps.is_empty());
    let report = harness::run(&scenario, None);
    assert!(report.passed());
    assert!(report.render().ends_with("result=PASS\n"));
}

#[test]
fn report_sections_come_in_fixed_order() {
    let report = harness::run(&parse_scenario("PURPOSE code=X\n").unwrap(), None).render();
    let pos: Vec<usize> = ["== scenario ==", "== steps ==", "== attacks ==", "== invariants ==", "== summary =="]
        .iter()
        .map(|h| report.find(h).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn syntax_errors_carry_line_numbers() {
    let cases = [
        ("PURPOSE code=X\nFROB a=b\n", 2),
        ("\n\nSILO domain=tax\n", 3),
        ("ADVANCE by=soon\n", 1),
        ("PURPOSE code=\"open\n", 1),
        ("ATTACK kind=Teleport\n", 1),
        ("SILO domain=tax fields=income:secret\n", 1),
    ];
    for (text, line) in cases {
        match parse_scenario(text) {
            Err(ScenarioError::Syntax { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
}

#[test]
fn forward_references_are_rejected() {
    let text = "SILO domain=tax fields=income:financial\nPUT master=ann silo=tax income=1\nMASTER id=ann name=Ann\n";
    match parse_scenario(text) {
        Err(e @ ScenarioError::Reference { line: 2, .. }) => assert!(e.to_string().starts_with("ScenarioReferenceError")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn small_population_cannot_be_measured() {
    let text = "SILO domain=a fields=x:other\nSILO domain=b fields=x:other\nPOPULATION n=1 domains=a,b\nATTACK kind=CrossSiloLink\n";
    let report = harness::run(&parse_scenario(text).unwrap(), None);
    assert_eq!(
        harness::adversary_link_accuracy(&report),
        Err(LinkageError::InsufficientPopulation { subjects: 1, domains: 2 })
    );
    assert!(!report.attacks[0].caught);
    assert!(!report.passed());
}

#[test]
fn failed_expectations_fail_the_report() {
    let text = "SILO domain=tax fields=income:financial\nMASTER id=a name=Abcdef\nPUT master=a silo=tax income=1\n\
                PURPOSE code=P\nPROGRAM id=p purpose=P scope=read/tax/financial\n\
                GRANT id=g scope=read/tax/financial purpose=P basis=legal\n\
                SUBMIT id=r grant=g program=p subjects=a expect=Deny(Window)\n";
    let report = harness::run(&parse_scenario(text).unwrap(), None);
    assert!(!report.invariant("expectations").unwrap().passed);
    assert!(report.render().contains("MISMATCH expected=Deny(Window)"));
}

#[test]
fn planted_plaintext_leak_is_found() {
    // Sentinel values become visible if they ever reach a scanned file.
    let files: BTreeMap<String, Vec<u8>> = [("silos/x/records/r.rec".to_string(), b"..Jane Q Public..".to_vec())].into();
    let hits = scan(&files, &[b"Jane Q Public".to_vec(), b"absent!".to_vec()]);
    assert_eq!(hits, vec![("silos/x/records/r.rec".to_string(), 0)]);
}

#[test]
fn scan_decodes_ledger_lines() {
    use base64::Engine;
    let line = base64::engine::general_purpose::STANDARD.encode(b"prefix secret-value suffix");
    let files: BTreeMap<String, Vec<u8>> = [("ledgers/a.log".to_string(), format!("{line}\n").into_bytes())].into();
    assert_eq!(scan(&files, &[b"secret-value".to_vec()]).len(), 1);
}

fn value() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9_+.-]{1,12}",
        "[ a-z\"#\\\\=]{0,10}",
    ]
}

fn scenario() -> impl Strategy<Value = Scenario> {
    (
        "[a-z][a-z0-9-]{0,10}",
        any::<u64>(),
        prop::collection::vec(("[a-z]{1,6}", value()), 1..4),
        prop::collection::vec(("[a-z]{1,6}", value()), 1..4),
        prop::collection::vec(0u64..1000, 0..3),
    )
        .prop_map(|(name, seed, attrs, fields, advances)| {
            let mut steps = vec![Step {
                line: 0,
                keyword: Keyword::Silo,
                args: vec![("domain".into(), "tax".into()), ("fields".into(), "income:financial,x:other".into())],
            }];
            let dedup = |kv: Vec<(String, String)>, reserved: &[&str]| -> Vec<(String, String)> {
                let mut seen = BTreeSet::new();
                kv.into_iter().filter(|(k, _)| !reserved.contains(&k.as_str()) && seen.insert(k.clone())).collect()
            };
            let mut master = vec![("id".to_string(), "m1".to_string())];
            master.extend(dedup(attrs, &["id"]));
            if master.len() == 1 {
                master.push(("name".into(), "x".into()));
            }
            steps.push(Step { line: 0, keyword: Keyword::Master, args: master });
            let mut put = vec![("master".to_string(), "m1".to_string()), ("silo".to_string(), "tax".to_string())];
            put.extend(dedup(fields, &["master", "silo"]));
            if put.len() == 2 {
                put.push(("income".into(), "1".into()));
            }
            steps.push(Step { line: 0, keyword: Keyword::Put, args: put });
            for by in advances {
                steps.push(Step { line: 0, keyword: Keyword::Advance, args: vec![("by".into(), by.to_string())] });
            }
            Scenario { name, seed, steps }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn print_then_parse_is_identity(s in scenario()) {
        let text = s.to_string();
        let back = parse_scenario(&text).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(back.to_string(), text);
    }

    #[test]
    fn scan_agrees_with_naive_search(
        hay in prop::collection::vec(any::<u8>(), 0..200),
        needles in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..6), 1..5),
        plant in any::<Option<(prop::sample::Index, prop::sample::Index)>>(),
    ) {
        let mut hay = hay;
        if let Some((which, at)) = plant {
            let n = which.get(&needles).clone();
            let pos = at.index(hay.len() + 1);
            hay.splice(pos..pos, n);
        }
        let files: BTreeMap<String, Vec<u8>> = [("f".to_string(), hay.clone())].into();
        let found: BTreeSet<usize> = scan(&files, &needles).into_iter().map(|(_, i)| i).collect();
        let naive: BTreeSet<usize> = needles
            .iter()
            .enumerate()
            .filter(|(_, n)| hay.windows(n.len()).any(|w| w == n.as_slice()))
            .map(|(i, _)| i)
            .collect();
        // Duplicate needles collapse to one index in scan's table.
        let naive_first: BTreeSet<usize> = naive.iter().filter(|&&i| !needles[..i].contains(&needles[i])).copied().collect();
        let found_first: BTreeSet<usize> = found.iter().map(|&i| needles.iter().position(|n| n == &needles[i]).unwrap()).collect();
        prop_assert_eq!(found_first, naive_first);
    }
}
