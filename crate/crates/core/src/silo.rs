//! Frontend domain store. Records are keyed by virtual identifier only and
//! held as dual-custody ciphertext; there is no plaintext read path.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canon::{CanonicalBytes, DecodeError, FieldList, Reader};
use crate::crypto::{self, combine_shares, record_nonce, to_hex, Custodian, DataKey, DecryptFailure, KeyShare};
use crate::ids::{FieldClass, Timestamp, VirtualId};

/// Field names that are never allowed in a frontend schema.
pub const WEAK_IDENTIFIER_DENYLIST: [&str; 6] = ["name", "full_name", "address", "phone", "email", "photo"];

const TAG_AAD: &str = "RECv1";
const TAG_FIELDS: &str = "FLDv1";
const TAG_RECORD: &str = "SILOv1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SiloError {
    #[error("field {0:?} is a weak identifier")]
    WeakIdentifierRejected(String),
    #[error("schema violation: {0}")]
    SchemaError(String),
    #[error("not found")]
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiloSchema {
    pub domain: String,
    pub field_classes: BTreeMap<String, FieldClass>,
    /// Regulator approval for contact-class fields.
    #[serde(default)]
    pub contact_approved: bool,
}

impl SiloSchema {
    pub fn new<I, S>(domain: &str, fields: I) -> Self
    where
        I: IntoIterator<Item = (S, FieldClass)>,
        S: Into<String>,
    {
        SiloSchema {
            domain: domain.into(),
            field_classes: fields.into_iter().map(|(n, c)| (n.into(), c)).collect(),
            contact_approved: false,
        }
    }

    pub fn validate(&self) -> Result<(), SiloError> {
        if self.field_classes.is_empty() {
            return Err(SiloError::SchemaError("schema has no fields".into()));
        }
        for (name, class) in &self.field_classes {
            let lowered = name.to_ascii_lowercase();
            if WEAK_IDENTIFIER_DENYLIST.contains(&lowered.as_str()) {
                return Err(SiloError::WeakIdentifierRejected(name.clone()));
            }
            if *class == FieldClass::Contact && !self.contact_approved {
                return Err(SiloError::WeakIdentifierRejected(name.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SiloRecord {
    pub record_id: String,
    pub vid: VirtualId,
    pub ciphertext: Vec<u8>,
    pub controller_share: KeyShare,
    pub created_at: Timestamp,
}

impl SiloRecord {
    pub fn to_bytes(&self) -> CanonicalBytes {
        let mut list = FieldList::new();
        list.str(&self.record_id)
            .str(&self.vid.domain)
            .uint(self.vid.vid)
            .uint(self.created_at)
            .bytes(&self.ciphertext)
            .bytes(&self.controller_share.share);
        list.encode(TAG_RECORD)
    }

    pub fn from_bytes(raw: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::expect(raw, TAG_RECORD)?;
        let record_id = r.string()?;
        let domain = r.string()?;
        let vid = r.uint()?;
        let created_at = r.uint()?;
        let ciphertext = r.bytes()?.to_vec();
        let share = r.array()?;
        r.finish()?;
        Ok(SiloRecord {
            record_id,
            vid: VirtualId { domain, vid },
            ciphertext,
            controller_share: KeyShare { share, holder: Custodian::Controller },
            created_at,
        })
    }
}

/// Associated data binding a ciphertext to its record.
pub fn record_aad(record_id: &str, vid: &VirtualId) -> CanonicalBytes {
    let mut list = FieldList::new();
    list.str(record_id).str(&vid.domain).uint(vid.vid);
    list.encode(TAG_AAD)
}

fn encode_fields(fields: &BTreeMap<String, String>) -> CanonicalBytes {
    let mut list = FieldList::new();
    for (k, v) in fields {
        list.str(k).str(v);
    }
    list.encode(TAG_FIELDS)
}

fn decode_fields(raw: &[u8]) -> Result<BTreeMap<String, String>, DecodeError> {
    let mut r = Reader::expect(raw, TAG_FIELDS)?;
    let mut out = BTreeMap::new();
    while !r.is_done() {
        let k = r.string()?;
        let v = r.string()?;
        out.insert(k, v);
    }
    Ok(out)
}

/// Decrypts a record payload with an already combined key.
pub fn decrypt_record(key: &DataKey, record_id: &str, vid: &VirtualId, ciphertext: &[u8]) -> Result<BTreeMap<String, String>, DecryptFailure> {
    let plain = crypto::open(key, &record_nonce(record_id), record_aad(record_id, vid).as_bytes(), ciphertext)?;
    decode_fields(&plain).map_err(|_| DecryptFailure)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Silo {
    schema: SiloSchema,
    records: BTreeMap<String, SiloRecord>,
}

impl Silo {
    pub fn register(schema: SiloSchema) -> Result<Self, SiloError> {
        schema.validate()?;
        Ok(Silo { schema, records: BTreeMap::new() })
    }

    /// Rebuilds a silo from persisted records.
    pub fn restore(schema: SiloSchema, records: Vec<SiloRecord>) -> Result<Self, SiloError> {
        let mut silo = Self::register(schema)?;
        for r in records {
            silo.records.insert(r.record_id.clone(), r);
        }
        Ok(silo)
    }

    pub fn schema(&self) -> &SiloSchema {
        &self.schema
    }

    pub fn domain(&self) -> &str {
        &self.schema.domain
    }

    /// Encrypts `fields` under a fresh two-share key. Returns the record id
    /// and the regulator share, which the caller deposits with the regulator.
    pub fn put_record<R: RngCore + CryptoRng>(
        &mut self,
        vid: &VirtualId,
        fields: &BTreeMap<String, String>,
        now: Timestamp,
        rng: &mut R,
    ) -> Result<(String, KeyShare), SiloError> {
        if vid.domain != self.schema.domain {
            return Err(SiloError::NotFound);
        }
        if fields.is_empty() {
            return Err(SiloError::SchemaError("record has no fields".into()));
        }
        if let Some(unknown) = fields.keys().find(|k| !self.schema.field_classes.contains_key(*k)) {
            return Err(SiloError::SchemaError(alloc::format!("undeclared field {unknown:?}")));
        }
        let record_id = loop {
            let mut raw = [0u8; 8];
            rng.fill_bytes(&mut raw);
            let id = alloc::format!("rec-{}", to_hex(&raw));
            if !self.records.contains_key(&id) {
                break id;
            }
        };
        let controller_share = KeyShare::generate(Custodian::Controller, rng);
        let regulator_share = KeyShare::generate(Custodian::Regulator, rng);
        let key = combine_shares(&controller_share, &regulator_share).expect("distinct holders");
        let plaintext = encode_fields(fields);
        let ciphertext = crypto::seal(
            &key,
            &record_nonce(&record_id),
            record_aad(&record_id, vid).as_bytes(),
            plaintext.as_bytes(),
        );
        self.records.insert(
            record_id.clone(),
            SiloRecord { record_id: record_id.clone(), vid: vid.clone(), ciphertext, controller_share, created_at: now },
        );
        Ok((record_id, regulator_share))
    }

    /// Metadata only: record ids and the identifiers they belong to.
    pub fn list(&self) -> Vec<(String, VirtualId)> {
        self.records.values().map(|r| (r.record_id.clone(), r.vid.clone())).collect()
    }

    pub fn fetch_ciphertext(&self, record_id: &str) -> Result<&[u8], SiloError> {
        self.records.get(record_id).map(|r| r.ciphertext.as_slice()).ok_or(SiloError::NotFound)
    }

    pub fn record(&self, record_id: &str) -> Option<&SiloRecord> {
        self.records.get(record_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &SiloRecord> {
        self.records.values()
    }

    /// The controller's own share for a record.
    pub fn controller_share(&self, record_id: &str) -> Result<&KeyShare, SiloError> {
        self.records.get(record_id).map(|r| &r.controller_share).ok_or(SiloError::NotFound)
    }

    pub fn records_for(&self, vid: &VirtualId) -> Vec<String> {
        self.records.values().filter(|r| &r.vid == vid).map(|r| r.record_id.clone()).collect()
    }

    pub fn holds(&self, vid: &VirtualId) -> bool {
        self.records.values().any(|r| &r.vid == vid)
    }

    /// Destroys ciphertext and controller shares for every record of `vid`.
    pub fn erase_subject(&mut self, vid: &VirtualId) -> Vec<String> {
        let ids = self.records_for(vid);
        for id in &ids {
            self.records.remove(id);
        }
        ids
    }

    pub fn class_of(&self, field: &str) -> Option<FieldClass> {
        self.schema.field_classes.get(field).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl core::fmt::Display for SiloSchema {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let fields: Vec<String> = self.field_classes.iter().map(|(n, c)| alloc::format!("{n}:{c}")).collect();
        write!(f, "{} [{}]", self.domain, fields.join(","))?;
        if self.contact_approved {
            f.write_str(" contact_approved")?;
        }
        Ok(())
    }
}

impl SiloError {
    pub fn kind(&self) -> String {
        match self {
            SiloError::WeakIdentifierRejected(_) => "WeakIdentifierRejected".to_string(),
            SiloError::SchemaError(_) => "SchemaError".to_string(),
            SiloError::NotFound => "NotFound".to_string(),
        }
    }
}
