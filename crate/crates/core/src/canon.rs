//! Length-prefixed, type-tagged canonical encoding.
//!
//! Layout: `len(tag) || tag || (len(field) || field)*`, every length a 4-byte
//! big-endian integer. Integers are 8-byte big-endian two's complement,
//! strings are UTF-8. The encoding carries no field types, so decoders read
//! fields in the order their schema declares.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

pub const MAX_TAG_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("type tag must be 1-{MAX_TAG_LEN} ASCII bytes")]
    BadTag,
    #[error("field of {0} bytes exceeds the 4-byte length prefix")]
    Oversize(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("input truncated at offset {0}")]
    Truncated(usize),
    #[error("expected tag {expected:?}, found {found:?}")]
    TagMismatch { expected: String, found: String },
    #[error("field {0} has the wrong width")]
    Width(usize),
    #[error("field {0} is not valid UTF-8")]
    Utf8(usize),
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("value out of range in field {0}")]
    Range(usize),
}

/// One field of a canonical record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field<'a> {
    Int(i64),
    Bytes(&'a [u8]),
    Str(&'a str),
}

impl Field<'_> {
    fn payload_len(&self) -> usize {
        match self {
            Field::Int(_) => 8,
            Field::Bytes(b) => b.len(),
            Field::Str(s) => s.len(),
        }
    }
}

/// Canonical encoding of a tagged field list. This is the only input ever
/// handed to a signature, hash or PRF.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalBytes(Vec<u8>);

impl CanonicalBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[u8]> for CanonicalBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for CanonicalBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanonicalBytes({} bytes)", self.0.len())
    }
}

fn check_tag(tag: &str) -> Result<(), EncodingError> {
    if tag.is_empty() || tag.len() > MAX_TAG_LEN || !tag.is_ascii() {
        return Err(EncodingError::BadTag);
    }
    Ok(())
}

/// Width check for a length prefix.
pub fn length_prefix(len: usize) -> Result<[u8; 4], EncodingError> {
    u32::try_from(len)
        .map(u32::to_be_bytes)
        .map_err(|_| EncodingError::Oversize(len))
}

pub fn encode(tag: &str, fields: &[Field<'_>]) -> Result<CanonicalBytes, EncodingError> {
    check_tag(tag)?;
    let total = 4 + tag.len() + fields.iter().map(|f| 4 + f.payload_len()).sum::<usize>();
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&length_prefix(tag.len())?);
    out.extend_from_slice(tag.as_bytes());
    for field in fields {
        out.extend_from_slice(&length_prefix(field.payload_len())?);
        match field {
            Field::Int(v) => out.extend_from_slice(&v.to_be_bytes()),
            Field::Bytes(b) => out.extend_from_slice(b),
            Field::Str(s) => out.extend_from_slice(s.as_bytes()),
        }
    }
    Ok(CanonicalBytes(out))
}

/// Encoding for the fixed internal tags, which are known-valid.
pub(crate) fn encode_internal(tag: &'static str, fields: &[Field<'_>]) -> CanonicalBytes {
    encode(tag, fields).expect("internal record exceeds canonical limits")
}

/// Growable field list for records with variable-length tails.
#[derive(Default)]
pub(crate) struct FieldList<'a> {
    fields: Vec<Field<'a>>,
}

impl<'a> FieldList<'a> {
    pub fn new() -> Self {
        Self { fields: Vec::new() }
    }

    pub fn uint(&mut self, v: u64) -> &mut Self {
        self.fields.push(Field::Int(v as i64));
        self
    }

    pub fn bytes(&mut self, b: &'a [u8]) -> &mut Self {
        self.fields.push(Field::Bytes(b));
        self
    }

    pub fn str(&mut self, s: &'a str) -> &mut Self {
        self.fields.push(Field::Str(s));
        self
    }

    pub fn encode(&self, tag: &'static str) -> CanonicalBytes {
        encode_internal(tag, &self.fields)
    }
}

/// Sequential reader over a canonical record.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    index: usize,
    tag: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self, DecodeError> {
        let mut r = Reader { buf, pos: 0, index: 0, tag: "" };
        let raw = r.chunk()?;
        r.tag = core::str::from_utf8(raw).map_err(|_| DecodeError::Utf8(0))?;
        r.index = 0;
        Ok(r)
    }

    /// Opens a record and requires its tag.
    pub fn expect(buf: &'a [u8], tag: &str) -> Result<Self, DecodeError> {
        let r = Self::new(buf)?;
        if r.tag != tag {
            return Err(DecodeError::TagMismatch { expected: tag.into(), found: r.tag.into() });
        }
        Ok(r)
    }

    pub fn tag(&self) -> &'a str {
        self.tag
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn chunk(&mut self) -> Result<&'a [u8], DecodeError> {
        let start = self.pos;
        let len_bytes = self
            .buf
            .get(start..start + 4)
            .ok_or(DecodeError::Truncated(start))?;
        let len = u32::from_be_bytes(len_bytes.try_into().unwrap()) as usize;
        let body = self
            .buf
            .get(start + 4..start + 4 + len)
            .ok_or(DecodeError::Truncated(start + 4))?;
        self.pos = start + 4 + len;
        self.index += 1;
        Ok(body)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        self.chunk()
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let raw = self.chunk()?;
        raw.try_into().map_err(|_| DecodeError::Width(self.index))
    }

    pub fn int(&mut self) -> Result<i64, DecodeError> {
        Ok(i64::from_be_bytes(self.array::<8>()?))
    }

    /// Unsigned values share the 8-byte layout; bit pattern read as `u64`.
    pub fn uint(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array::<8>()?))
    }

    pub fn str(&mut self) -> Result<&'a str, DecodeError> {
        let raw = self.chunk()?;
        core::str::from_utf8(raw).map_err(|_| DecodeError::Utf8(self.index))
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        self.str().map(String::from)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.is_done() {
            Ok(())
        } else {
            Err(DecodeError::Trailing(self.buf.len() - self.pos))
        }
    }
}
