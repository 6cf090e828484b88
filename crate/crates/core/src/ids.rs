//! Identifiers and access scopes shared by every service.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{from_hex, to_hex};

/// Seconds on whichever clock the deployment runs (wall or logical).
pub type Timestamp = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("invalid master id {0:?}")]
    MasterId(String),
    #[error("invalid virtual id {0:?}")]
    VirtualId(String),
    #[error("invalid scope {0:?}")]
    Scope(String),
    #[error("unknown field class {0:?}")]
    FieldClass(String),
    #[error("unknown operation {0:?}")]
    Operation(String),
    #[error("unknown basis {0:?}")]
    Basis(String),
}

/// Opaque 16-byte identifier of a master record.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MasterId(pub [u8; 16]);

impl fmt::Display for MasterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&to_hex(&self.0))
    }
}

impl fmt::Debug for MasterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MasterId({self})")
    }
}

impl FromStr for MasterId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        from_hex(s)
            .and_then(|v| <[u8; 16]>::try_from(v.as_slice()).ok())
            .map(MasterId)
            .ok_or_else(|| ParseError::MasterId(s.into()))
    }
}

impl Serialize for MasterId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MasterId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-domain pseudonym, rendered as 20 zero-padded decimal digits.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualId {
    pub domain: String,
    pub vid: u64,
}

impl VirtualId {
    pub fn new(domain: impl Into<String>, vid: u64) -> Self {
        VirtualId { domain: domain.into(), vid }
    }

    pub fn digits(&self) -> String {
        alloc::format!("{:020}", self.vid)
    }
}

impl fmt::Display for VirtualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:020}", self.domain, self.vid)
    }
}

impl fmt::Debug for VirtualId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "VirtualId({self})")
    }
}

impl FromStr for VirtualId {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseError::VirtualId(s.into());
        let (domain, digits) = s.split_once(':').ok_or_else(err)?;
        if domain.is_empty() || digits.len() != 20 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err());
        }
        Ok(VirtualId { domain: domain.into(), vid: digits.parse().map_err(|_| err())? })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FieldClass {
    Demographic,
    Financial,
    Health,
    Contact,
    Other,
}

impl FieldClass {
    pub const ALL: [FieldClass; 5] = [
        FieldClass::Demographic,
        FieldClass::Financial,
        FieldClass::Health,
        FieldClass::Contact,
        FieldClass::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FieldClass::Demographic => "demographic",
            FieldClass::Financial => "financial",
            FieldClass::Health => "health",
            FieldClass::Contact => "contact",
            FieldClass::Other => "other",
        }
    }
}

impl FromStr for FieldClass {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FieldClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| ParseError::FieldClass(s.into()))
    }
}

impl fmt::Display for FieldClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Operation {
    Read,
    Resolve,
    Link,
    Mine,
}

impl Operation {
    pub fn as_str(self) -> &'static str {
        match self {
            Operation::Read => "read",
            Operation::Resolve => "resolve",
            Operation::Link => "link",
            Operation::Mine => "mine",
        }
    }

    /// Operations that release record key shares.
    pub fn releases_records(self) -> bool {
        matches!(self, Operation::Read | Operation::Mine)
    }
}

impl FromStr for Operation {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "read" => Ok(Operation::Read),
            "resolve" => Ok(Operation::Resolve),
            "link" => Ok(Operation::Link),
            "mine" => Ok(Operation::Mine),
            _ => Err(ParseError::Operation(s.into())),
        }
    }
}

/// What data an access may touch: one operation over a set of domains and
/// field classes. Text form is `op/domain,domain/class,class`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scope {
    pub operation: Operation,
    pub domains: BTreeSet<String>,
    pub fields: BTreeSet<FieldClass>,
}

impl Scope {
    pub fn new<D, F>(operation: Operation, domains: D, fields: F) -> Self
    where
        D: IntoIterator,
        D::Item: Into<String>,
        F: IntoIterator<Item = FieldClass>,
    {
        Scope {
            operation,
            domains: domains.into_iter().map(Into::into).collect(),
            fields: fields.into_iter().collect(),
        }
    }

    /// `self ⊆ other`: same operation, and domains and field classes contained.
    pub fn is_within(&self, other: &Scope) -> bool {
        self.operation == other.operation
            && self.domains.is_subset(&other.domains)
            && self.fields.is_subset(&other.fields)
    }

    pub(crate) fn push_fields<'a>(&'a self, list: &mut crate::canon::FieldList<'a>) {
        list.str(self.operation.as_str());
        list.uint(self.domains.len() as u64);
        for d in &self.domains {
            list.str(d);
        }
        list.uint(self.fields.len() as u64);
        for c in &self.fields {
            list.str(c.as_str());
        }
    }

    pub(crate) fn read_fields(r: &mut crate::canon::Reader<'_>) -> Result<Scope, crate::canon::DecodeError> {
        use crate::canon::DecodeError;
        let operation = r.str()?.parse().map_err(|_| DecodeError::Range(0))?;
        let n = r.uint()?;
        let mut domains = BTreeSet::new();
        for _ in 0..n {
            domains.insert(r.string()?);
        }
        let n = r.uint()?;
        let mut fields = BTreeSet::new();
        for _ in 0..n {
            fields.insert(r.str()?.parse().map_err(|_| DecodeError::Range(0))?);
        }
        Ok(Scope { operation, domains, fields })
    }
}

fn join<I: IntoIterator<Item = T>, T: fmt::Display>(items: I) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.operation.as_str(), join(&self.domains), join(&self.fields))
    }
}

impl FromStr for Scope {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseError::Scope(s.into());
        let mut parts = s.split('/');
        let (Some(op), Some(domains), Some(fields), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(err());
        };
        let operation = op.parse()?;
        let domains: BTreeSet<String> = domains.split(',').filter(|d| !d.is_empty()).map(String::from).collect();
        if domains.is_empty() {
            return Err(err());
        }
        let fields = fields
            .split(',')
            .filter(|c| !c.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(Scope { operation, domains, fields })
    }
}
