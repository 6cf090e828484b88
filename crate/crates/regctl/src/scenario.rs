//! Line-oriented scenario files.
//!
//! One step per line: `KEYWORD key=value ...`. Values containing spaces,
//! quotes or `#` are double-quoted with `\"` and `\\` escapes. A `#` at the
//! start of a token begins a comment. The optional first step
//! `SCENARIO name=.. seed=..` names the run and fixes its seed.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use pdgate_core::gate::Denial;
use pdgate_core::registry::Basis;
use pdgate_core::{FieldClass, Scope};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("ScenarioSyntaxError: line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("ScenarioReferenceError: line {line}: {message}")]
    Reference { line: usize, message: String },
    #[error("cannot read scenario {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Keyword {
    Silo,
    Master,
    Put,
    Purpose,
    Program,
    Grant,
    Extend,
    Revoke,
    Consent,
    Renew,
    Optout,
    Submit,
    Open,
    Resolve,
    Link,
    Alias,
    Route,
    Advance,
    Population,
    Traffic,
    Concurrent,
    Attack,
}

impl Keyword {
    const ALL: [Keyword; 22] = [
        Keyword::Silo,
        Keyword::Master,
        Keyword::Put,
        Keyword::Purpose,
        Keyword::Program,
        Keyword::Grant,
        Keyword::Extend,
        Keyword::Revoke,
        Keyword::Consent,
        Keyword::Renew,
        Keyword::Optout,
        Keyword::Submit,
        Keyword::Open,
        Keyword::Resolve,
        Keyword::Link,
        Keyword::Alias,
        Keyword::Route,
        Keyword::Advance,
        Keyword::Population,
        Keyword::Traffic,
        Keyword::Concurrent,
        Keyword::Attack,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Keyword::Silo => "SILO",
            Keyword::Master => "MASTER",
            Keyword::Put => "PUT",
            Keyword::Purpose => "PURPOSE",
            Keyword::Program => "PROGRAM",
            Keyword::Grant => "GRANT",
            Keyword::Extend => "EXTEND",
            Keyword::Revoke => "REVOKE",
            Keyword::Consent => "CONSENT",
            Keyword::Renew => "RENEW",
            Keyword::Optout => "OPTOUT",
            Keyword::Submit => "SUBMIT",
            Keyword::Open => "OPEN",
            Keyword::Resolve => "RESOLVE",
            Keyword::Link => "LINK",
            Keyword::Alias => "ALIAS",
            Keyword::Route => "ROUTE",
            Keyword::Advance => "ADVANCE",
            Keyword::Population => "POPULATION",
            Keyword::Traffic => "TRAFFIC",
            Keyword::Concurrent => "CONCURRENT",
            Keyword::Attack => "ATTACK",
        }
    }
}

impl FromStr for Keyword {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Keyword::ALL.into_iter().find(|k| k.as_str() == s).ok_or(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackKind {
    CrossSiloLink,
    ReplayRequest,
    TamperProgram,
    TruncateLedger,
    ForgeTicket,
    AccessAfterOptOut,
    WeakIdSmuggle,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::CrossSiloLink,
        AttackKind::ReplayRequest,
        AttackKind::TamperProgram,
        AttackKind::TruncateLedger,
        AttackKind::ForgeTicket,
        AttackKind::AccessAfterOptOut,
        AttackKind::WeakIdSmuggle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::CrossSiloLink => "CrossSiloLink",
            AttackKind::ReplayRequest => "ReplayRequest",
            AttackKind::TamperProgram => "TamperProgram",
            AttackKind::TruncateLedger => "TruncateLedger",
            AttackKind::ForgeTicket => "ForgeTicket",
            AttackKind::AccessAfterOptOut => "AccessAfterOptOut",
            AttackKind::WeakIdSmuggle => "WeakIdSmuggle",
        }
    }
}

impl FromStr for AttackKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        AttackKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or(())
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One declaration. Equality ignores the source line.
#[derive(Debug, Clone)]
pub struct Step {
    pub line: usize,
    pub keyword: Keyword,
    pub args: Vec<(String, String)>,
}

impl PartialEq for Step {
    fn eq(&self, other: &Self) -> bool {
        self.keyword == other.keyword && self.args == other.args
    }
}

impl Eq for Step {}

impl Step {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.args.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// A key the validator has already required.
    pub fn req(&self, key: &str) -> &str {
        self.get(key).unwrap_or_else(|| panic!("validated step lacks {key}"))
    }

    pub fn num(&self, key: &str) -> Option<u64> {
        self.get(key).map(|v| v.parse().expect("validated integer"))
    }

    pub fn list(&self, key: &str) -> Vec<&str> {
        self.get(key).map(|v| v.split(',').filter(|s| !s.is_empty()).collect()).unwrap_or_default()
    }

    /// Arguments outside the keyword's fixed keys (attributes, field values).
    pub fn extras(&self) -> impl Iterator<Item = (&str, &str)> {
        let shape = shape(self.keyword, self.get("kind"));
        self.args
            .iter()
            .filter(move |(k, _)| !shape.required.contains(&k.as_str()) && !shape.optional.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn attack(&self) -> Option<AttackKind> {
        (self.keyword == Keyword::Attack).then(|| self.req("kind").parse().expect("validated attack kind"))
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword.as_str())?;
        for (k, v) in &self.args {
            write!(f, " {k}={}", quote(v))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub steps: Vec<Step>,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario { name: "unnamed".into(), seed: 0, steps: Vec::new() }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "SCENARIO name={} seed={}", quote(&self.name), self.seed)?;
        for s in &self.steps {
            writeln!(f, "{s}")?;
        }
        Ok(())
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ScenarioError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_scenario(&text)
}

fn quote(v: &str) -> String {
    if !v.is_empty() && !v.chars().any(|c| c.is_whitespace() || c == '"' || c == '#' || c == '\\') {
        return v.to_string();
    }
    let mut out = String::from("\"");
    for c in v.chars() {
        if c == '"' || c == '\\' {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

fn tokenize(line: &str, lineno: usize) -> Result<Vec<String>, ScenarioError> {
    let syntax = |message: &str| ScenarioError::Syntax { line: lineno, message: message.into() };
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        match chars.peek() {
            None | Some('#') => break,
            _ => {}
        }
        let mut tok = String::new();
        let mut quoted = false;
        while let Some(&c) = chars.peek() {
            if !quoted && c.is_whitespace() {
                break;
            }
            chars.next();
            match c {
                '"' => quoted = !quoted,
                '\\' if quoted => tok.push(chars.next().ok_or_else(|| syntax("dangling escape"))?),
                _ => tok.push(c),
            }
        }
        if quoted {
            return Err(syntax("unterminated quote"));
        }
        tokens.push(tok);
    }
    Ok(tokens)
}

/// Fixed keys per keyword; `free` allows any further keys.
struct Shape {
    required: &'static [&'static str],
    optional: &'static [&'static str],
    free: bool,
}

const fn sh(required: &'static [&'static str], optional: &'static [&'static str], free: bool) -> Shape {
    Shape { required, optional, free }
}

fn shape(keyword: Keyword, kind: Option<&str>) -> Shape {
    match keyword {
        Keyword::Silo => sh(&["domain", "fields"], &["contact"], false),
        Keyword::Master => sh(&["id"], &[], true),
        Keyword::Put => sh(&["master", "silo"], &[], true),
        Keyword::Purpose => sh(&["code"], &["description"], false),
        Keyword::Program => sh(&["id", "purpose", "scope"], &["artifact"], false),
        Keyword::Grant => sh(&["id", "scope", "purpose", "basis"], &["from", "until", "grantee"], false),
        Keyword::Extend => sh(&["id", "grant", "purpose"], &[], false),
        Keyword::Revoke => sh(&["grant"], &[], false),
        Keyword::Consent | Keyword::Renew | Keyword::Optout => sh(&["master", "purpose"], &["silo"], false),
        Keyword::Submit => sh(
            &["id", "grant", "program", "subjects"],
            &["silo", "scope", "purpose", "artifact", "requester", "expect"],
            false,
        ),
        Keyword::Open => sh(&["request"], &["share", "expect"], false),
        Keyword::Resolve => sh(&["master", "silo"], &["request", "expect"], false),
        Keyword::Link => sh(&["master", "from", "to"], &["request", "expect"], false),
        Keyword::Alias => sh(&["id", "master", "ttl"], &[], false),
        Keyword::Route => sh(&["alias"], &["expect"], false),
        Keyword::Advance => sh(&["by"], &[], false),
        Keyword::Population => sh(&["n", "domains"], &[], false),
        Keyword::Traffic => sh(&["n", "grant", "program"], &[], false),
        Keyword::Concurrent => sh(&["k", "grant", "program"], &[], false),
        Keyword::Attack => match kind.and_then(|k| k.parse().ok()) {
            Some(AttackKind::CrossSiloLink) => sh(&["kind"], &[], false),
            Some(AttackKind::ReplayRequest) => sh(&["kind", "request"], &[], false),
            Some(AttackKind::TamperProgram) => sh(&["kind", "grant", "program", "subjects"], &["silo"], false),
            Some(AttackKind::TruncateLedger) => sh(&["kind"], &["party", "mode"], false),
            Some(AttackKind::ForgeTicket) => sh(&["kind", "request"], &[], false),
            Some(AttackKind::AccessAfterOptOut) => sh(&["kind", "master", "grant", "program"], &["silo"], false),
            Some(AttackKind::WeakIdSmuggle) => sh(&["kind"], &["field"], false),
            None => sh(&["kind"], &[], false),
        },
    }
}

const INT_KEYS: [&str; 7] = ["from", "until", "ttl", "by", "n", "k", "seed"];

/// Entities a step may declare or reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Entity {
    Silo,
    Master,
    Purpose,
    Program,
    Grant,
    Request,
    Alias,
}

impl Entity {
    fn as_str(self) -> &'static str {
        match self {
            Entity::Silo => "silo",
            Entity::Master => "master",
            Entity::Purpose => "purpose",
            Entity::Program => "program",
            Entity::Grant => "grant",
            Entity::Request => "request",
            Entity::Alias => "alias",
        }
    }
}

fn references(step: &Step) -> Vec<(Entity, &str)> {
    let mut out = Vec::new();
    let mut one = |e: Entity, key: &str| {
        if let Some(v) = step.get(key) {
            out.push((e, v));
        }
    };
    match step.keyword {
        Keyword::Put => {
            one(Entity::Master, "master");
            one(Entity::Silo, "silo");
        }
        Keyword::Program | Keyword::Grant => one(Entity::Purpose, "purpose"),
        Keyword::Extend => {
            one(Entity::Grant, "grant");
            one(Entity::Purpose, "purpose");
        }
        Keyword::Revoke => one(Entity::Grant, "grant"),
        Keyword::Consent | Keyword::Renew | Keyword::Optout => {
            one(Entity::Master, "master");
            one(Entity::Purpose, "purpose");
            one(Entity::Silo, "silo");
        }
        Keyword::Submit | Keyword::Attack => {
            one(Entity::Grant, "grant");
            one(Entity::Program, "program");
            one(Entity::Silo, "silo");
            one(Entity::Request, "request");
            one(Entity::Master, "master");
        }
        Keyword::Open => one(Entity::Request, "request"),
        Keyword::Resolve => {
            one(Entity::Master, "master");
            one(Entity::Silo, "silo");
            one(Entity::Request, "request");
        }
        Keyword::Link => {
            one(Entity::Master, "master");
            one(Entity::Silo, "from");
            one(Entity::Silo, "to");
            one(Entity::Request, "request");
        }
        Keyword::Alias => one(Entity::Master, "master"),
        Keyword::Route => one(Entity::Alias, "alias"),
        Keyword::Traffic | Keyword::Concurrent => {
            one(Entity::Grant, "grant");
            one(Entity::Program, "program");
        }
        _ => {}
    }
    for key in ["subjects"] {
        for m in step.list(key) {
            out.push((Entity::Master, m));
        }
    }
    if step.keyword == Keyword::Population {
        for d in step.list("domains") {
            out.push((Entity::Silo, d));
        }
    }
    out
}

fn declaration(step: &Step) -> Option<(Entity, &str)> {
    match step.keyword {
        Keyword::Silo => Some((Entity::Silo, step.req("domain"))),
        Keyword::Master => Some((Entity::Master, step.req("id"))),
        Keyword::Purpose => Some((Entity::Purpose, step.req("code"))),
        Keyword::Program => Some((Entity::Program, step.req("id"))),
        Keyword::Grant | Keyword::Extend => Some((Entity::Grant, step.req("id"))),
        Keyword::Submit => Some((Entity::Request, step.req("id"))),
        Keyword::Alias => Some((Entity::Alias, step.req("id"))),
        _ => None,
    }
}

fn check_values(step: &Step) -> Result<(), String> {
    // LINK's from= is a domain; MASTER and PUT keys are free-form data.
    let numeric = !matches!(step.keyword, Keyword::Link | Keyword::Master | Keyword::Put);
    for (k, v) in &step.args {
        if numeric && INT_KEYS.contains(&k.as_str()) && v.parse::<u64>().is_err() {
            return Err(format!("{k} must be a non-negative integer, got {v:?}"));
        }
    }
    if let Some(fields) = step.get("fields").filter(|_| step.keyword == Keyword::Silo) {
        for f in fields.split(',') {
            let (_, class) = f.split_once(':').ok_or_else(|| format!("field {f:?} needs name:class"))?;
            class.parse::<FieldClass>().map_err(|e| e.to_string())?;
        }
    }
    if let Some(scope) = step.get("scope") {
        scope.parse::<Scope>().map_err(|e| e.to_string())?;
    }
    if let Some(basis) = step.get("basis") {
        basis.parse::<Basis>().map_err(|e| e.to_string())?;
    }
    if step.keyword == Keyword::Submit {
        if let Some(e) = step.get("expect") {
            let ok = e == "Allow"
                || e == "Protocol"
                || e.strip_prefix("Deny(").and_then(|r| r.strip_suffix(')')).and_then(Denial::parse).is_some();
            if !ok {
                return Err(format!("expect must be Allow, Protocol or Deny(reason), got {e:?}"));
            }
        }
    }
    if let Some(share) = step.get("share") {
        if !["own", "zero", "random"].contains(&share) {
            return Err(format!("share must be own, zero or random, got {share:?}"));
        }
    }
    if let Some(mode) = step.get("mode") {
        if !["truncate", "insert"].contains(&mode) {
            return Err(format!("mode must be truncate or insert, got {mode:?}"));
        }
    }
    if let Some(party) = step.get("party") {
        if !["regulator", "controller"].contains(&party) {
            return Err(format!("party must be regulator or controller, got {party:?}"));
        }
    }
    if matches!(step.keyword, Keyword::Master | Keyword::Put) && step.extras().next().is_none() {
        return Err(format!("{} needs at least one key=value beyond its fixed keys", step.keyword.as_str()));
    }
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut scenario = Scenario::default();
    let mut declared: BTreeSet<(Entity, String)> = BTreeSet::new();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let syntax = |message: String| ScenarioError::Syntax { line, message };
        let tokens = tokenize(raw, line)?;
        let Some((head, rest)) = tokens.split_first() else { continue };
        let mut args = Vec::new();
        for t in rest {
            let (k, v) = t.split_once('=').ok_or_else(|| syntax(format!("expected key=value, got {t:?}")))?;
            if k.is_empty() {
                return Err(syntax(format!("empty key in {t:?}")));
            }
            if args.iter().any(|(ek, _): &(String, String)| ek == k) {
                return Err(syntax(format!("duplicate key {k:?}")));
            }
            args.push((k.to_string(), v.to_string()));
        }
        if head == "SCENARIO" {
            if seen_header || !scenario.steps.is_empty() {
                return Err(syntax("SCENARIO must be the first step and appear once".into()));
            }
            seen_header = true;
            for (k, v) in args {
                match k.as_str() {
                    "name" => scenario.name = v,
                    "seed" => scenario.seed = v.parse().map_err(|_| syntax(format!("bad seed {v:?}")))?,
                    _ => return Err(syntax(format!("unknown SCENARIO key {k:?}"))),
                }
            }
            continue;
        }
        let keyword: Keyword = head.parse().map_err(|_| syntax(format!("unknown keyword {head:?}")))?;
        let step = Step { line, keyword, args };
        if keyword == Keyword::Attack {
            match step.get("kind") {
                None => return Err(syntax("ATTACK needs kind=".into())),
                Some(k) if k.parse::<AttackKind>().is_err() => {
                    return Err(syntax(format!("unknown attack kind {k:?}")));
                }
                _ => {}
            }
        }
        let sh = shape(keyword, step.get("kind"));
        for r in sh.required {
            if step.get(r).is_none() {
                return Err(syntax(format!("{head} needs {r}=")));
            }
        }
        if !sh.free {
            if let Some((k, _)) = step.args.iter().find(|(k, _)| !sh.required.contains(&k.as_str()) && !sh.optional.contains(&k.as_str())) {
                return Err(syntax(format!("{head} does not take {k}=")));
            }
        }
        check_values(&step).map_err(syntax)?;
        for (entity, name) in references(&step) {
            if !declared.contains(&(entity, name.to_string())) {
                return Err(ScenarioError::Reference {
                    line,
                    message: format!("{} {name:?} is not declared before use", entity.as_str()),
                });
            }
        }
        if let Some((entity, name)) = declaration(&step) {
            declared.insert((entity, name.to_string()));
        }
        scenario.steps.push(step);
    }
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_an_empty_scenario() {
        assert_eq!(parse_scenario("").unwrap(), Scenario::default());
        assert_eq!(parse_scenario("# only a comment\n\n").unwrap().steps.len(), 0);
    }

    #[test]
    fn quoting_round_trips() {
        let text = "SCENARIO name=\"two words\" seed=3\nPURPOSE code=TAX description=\"say \\\"hi\\\" # not a comment\"\n";
        let s = parse_scenario(text).unwrap();
        assert_eq!(s.name, "two words");
        assert_eq!(s.steps[0].get("description"), Some("say \"hi\" # not a comment"));
        assert_eq!(parse_scenario(&s.to_string()).unwrap(), s);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse_scenario("PURPOSE code=TAX\n\nPUT master=alice silo=tax x=1\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Reference { line: 3, .. }), "{e}");
        let e = parse_scenario("SILO domain=tax\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Syntax { line: 1, .. }), "{e}");
        let e = parse_scenario("# c\nFLY to=moon\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Syntax { line: 2, .. }), "{e}");
        let e = parse_scenario("ATTACK kind=Meteor\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Syntax { line: 1, .. }), "{e}");
        let e = parse_scenario("ADVANCE by=-1\n").unwrap_err();
        assert!(matches!(e, ScenarioError::Syntax { line: 1, .. }), "{e}");
    }
}
