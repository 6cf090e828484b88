//! Primitive layer: keyed PRF, hashing, hash chaining, Ed25519 signatures,
//! two-share key combination and record AEAD.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use hmac::{Hmac, Mac};
use rand_core::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canon::{self, CanonicalBytes, Field};

pub type Hash32 = [u8; 32];
pub const ZERO_HASH: Hash32 = [0; 32];
pub const SIGNATURE_LEN: usize = 64;

pub const TAG_LOG: &str = "LOGv1";
pub const TAG_KEY: &str = "KEYv1";
const TAG_NONCE: &str = "NONCEv1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DerivationError {
    #[error("domain tag must be non-empty")]
    EmptyDomainTag,
    #[error("domain tag is not a valid record tag")]
    BadDomainTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SignatureError {
    #[error("signature must be {SIGNATURE_LEN} bytes, got {0}")]
    Length(usize),
    #[error("public key is not a valid curve point")]
    PublicKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CustodyError {
    #[error("both shares are held by {0:?}")]
    SameHolder(Custodian),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("authenticated decryption failed")]
pub struct DecryptFailure;

pub fn sha256(data: &[u8]) -> Hash32 {
    Sha256::digest(data).into()
}

pub fn hmac_sha256(key: &[u8], message: &[u8]) -> Hash32 {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// HMAC-SHA-256 over `canon(domain_tag, [message])`.
pub fn prf_derive(key: &[u8; 32], domain_tag: &str, message: &[u8]) -> Result<Hash32, DerivationError> {
    if domain_tag.is_empty() {
        return Err(DerivationError::EmptyDomainTag);
    }
    let input = canon::encode(domain_tag, &[Field::Bytes(message)])
        .map_err(|_| DerivationError::BadDomainTag)?;
    Ok(hmac_sha256(key, input.as_bytes()))
}

/// Next link of a hash chain; `prev` is all-zero for the genesis entry.
pub fn chain_hash(prev: &Hash32, entry: &CanonicalBytes) -> Hash32 {
    let input = canon::encode_internal(TAG_LOG, &[Field::Bytes(prev), Field::Bytes(entry.as_bytes())]);
    sha256(input.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Regulator,
    Controller,
    Subject,
    Program,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Regulator => "regulator",
            Role::Controller => "controller",
            Role::Subject => "subject",
            Role::Program => "program",
        }
    }
}

/// Public half of a signing key, addressed by `key_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SigningIdentity {
    pub key_id: String,
    pub public_key: [u8; 32],
    pub role: Role,
}

impl SigningIdentity {
    pub fn verify(&self, payload: &CanonicalBytes, signature: &[u8]) -> Result<bool, SignatureError> {
        verify(self, payload, signature)
    }
}

/// Secret signing key bound to its identity.
#[derive(Clone)]
pub struct Signer {
    identity: SigningIdentity,
    key: SigningKey,
}

impl Signer {
    pub fn from_seed(key_id: impl Into<String>, role: Role, seed: [u8; 32]) -> Self {
        let key = SigningKey::from_bytes(&seed);
        let identity = SigningIdentity {
            key_id: key_id.into(),
            public_key: key.verifying_key().to_bytes(),
            role,
        };
        Signer { identity, key }
    }

    pub fn generate<R: RngCore + CryptoRng>(key_id: impl Into<String>, role: Role, rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Self::from_seed(key_id, role, seed)
    }

    pub fn identity(&self) -> &SigningIdentity {
        &self.identity
    }

    pub fn key_id(&self) -> &str {
        &self.identity.key_id
    }

    pub fn seed(&self) -> [u8; 32] {
        self.key.to_bytes()
    }

    pub fn sign(&self, payload: &CanonicalBytes) -> Signature {
        sign(self, payload)
    }
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer").field("identity", &self.identity).finish_non_exhaustive()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(#[serde(with = "sig_bytes")] pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }

    pub fn from_slice(raw: &[u8]) -> Result<Self, SignatureError> {
        raw.try_into().map(Signature).map_err(|_| SignatureError::Length(raw.len()))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

mod sig_bytes {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_bytes(v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 64], D::Error> {
        let v = alloc::vec::Vec::<u8>::deserialize(d)?;
        v.as_slice().try_into().map_err(|_| D::Error::invalid_length(v.len(), &"64 bytes"))
    }
}

/// Hex text in human-readable formats so persisted shares stay greppable.
mod hex_bytes {
    use alloc::string::String;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        if s.is_human_readable() {
            s.serialize_str(&super::to_hex(v))
        } else {
            s.serialize_bytes(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let raw = if d.is_human_readable() {
            let s = String::deserialize(d)?;
            super::from_hex(&s).ok_or_else(|| D::Error::custom("invalid hex"))?
        } else {
            alloc::vec::Vec::<u8>::deserialize(d)?
        };
        raw.as_slice().try_into().map_err(|_| D::Error::invalid_length(raw.len(), &"32 bytes"))
    }
}

pub fn sign(signer: &Signer, payload: &CanonicalBytes) -> Signature {
    Signature(signer.key.sign(payload.as_bytes()).to_bytes())
}

pub fn verify(identity: &SigningIdentity, payload: &CanonicalBytes, signature: &[u8]) -> Result<bool, SignatureError> {
    let raw: &[u8; SIGNATURE_LEN] = signature
        .try_into()
        .map_err(|_| SignatureError::Length(signature.len()))?;
    let key = VerifyingKey::from_bytes(&identity.public_key).map_err(|_| SignatureError::PublicKey)?;
    let sig = ed25519_dalek::Signature::from_bytes(raw);
    Ok(key.verify(payload.as_bytes(), &sig).is_ok())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Custodian {
    Controller,
    Regulator,
}

/// One half of a record key. `Debug` never prints the secret.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyShare {
    #[serde(with = "hex_bytes")]
    pub share: [u8; 32],
    pub holder: Custodian,
}

impl KeyShare {
    pub fn generate<R: RngCore + CryptoRng>(holder: Custodian, rng: &mut R) -> Self {
        let mut share = [0u8; 32];
        rng.fill_bytes(&mut share);
        KeyShare { share, holder }
    }
}

impl fmt::Debug for KeyShare {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyShare({:?}, <redacted>)", self.holder)
    }
}

/// Record key, usable only with both custodians' shares.
#[derive(Clone, PartialEq, Eq)]
pub struct DataKey([u8; 32]);

impl DataKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Debug for DataKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DataKey(<redacted>)")
    }
}

pub fn combine_shares(a: &KeyShare, b: &KeyShare) -> Result<DataKey, CustodyError> {
    if a.holder == b.holder {
        return Err(CustodyError::SameHolder(a.holder));
    }
    let (ctrl, reg) = if a.holder == Custodian::Controller { (a, b) } else { (b, a) };
    let input = canon::encode_internal(TAG_KEY, &[Field::Bytes(&ctrl.share), Field::Bytes(&reg.share)]);
    Ok(DataKey(sha256(input.as_bytes())))
}

/// 96-bit AEAD nonce bound to a record identifier.
pub fn record_nonce(record_id: &str) -> [u8; 12] {
    let digest = sha256(canon::encode_internal(TAG_NONCE, &[Field::Str(record_id)]).as_bytes());
    let mut nonce = [0u8; 12];
    nonce.copy_from_slice(&digest[..12]);
    nonce
}

pub fn seal(key: &DataKey, nonce: &[u8; 12], aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(Key::from_slice(&key.0))
        .encrypt(Nonce::from_slice(nonce), Payload { msg: plaintext, aad })
        .expect("ChaCha20-Poly1305 encryption is infallible for in-memory buffers")
}

pub fn open(key: &DataKey, nonce: &[u8; 12], aad: &[u8], ciphertext: &[u8]) -> Result<Vec<u8>, DecryptFailure> {
    ChaCha20Poly1305::new(Key::from_slice(&key.0))
        .decrypt(Nonce::from_slice(nonce), Payload { msg: ciphertext, aad })
        .map_err(|_| DecryptFailure)
}

/// Lowercase hex rendering.
pub fn to_hex(bytes: &[u8]) -> String {
    const DIGITS: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(DIGITS[(b >> 4) as usize] as char);
        s.push(DIGITS[(b & 0xf) as usize] as char);
    }
    s
}

pub fn from_hex(s: &str) -> Option<Vec<u8>> {
    if !s.len().is_multiple_of(2) {
        return None;
    }
    s.as_bytes()
        .chunks(2)
        .map(|pair| {
            let hi = (pair[0] as char).to_digit(16)?;
            let lo = (pair[1] as char).to_digit(16)?;
            Some((hi * 16 + lo) as u8)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn prf_is_deterministic_and_rejects_empty_tag() {
        let key = [9u8; 32];
        assert_eq!(prf_derive(&key, "VID|tax", b"m").unwrap(), prf_derive(&key, "VID|tax", b"m").unwrap());
        assert_eq!(prf_derive(&key, "", b"m"), Err(DerivationError::EmptyDomainTag));
        assert_eq!(prf_derive(&key, "a-tag-that-is-too-long", b"m"), Err(DerivationError::BadDomainTag));
    }

    #[test]
    fn sign_verify_round_trip_and_wrong_key() {
        let mut rng = rng();
        let alice = Signer::generate("alice", Role::Controller, &mut rng);
        let bob = Signer::generate("bob", Role::Controller, &mut rng);
        let payload = canon::encode("T", &[Field::Str("hello")]).unwrap();
        let sig = alice.sign(&payload);
        assert_eq!(verify(alice.identity(), &payload, &sig.0), Ok(true));
        assert_eq!(verify(bob.identity(), &payload, &sig.0), Ok(false));
        assert_eq!(verify(alice.identity(), &payload, &sig.0[..63]), Err(SignatureError::Length(63)));
    }

    #[test]
    fn chain_hash_changes_with_entry() {
        let a = canon::encode("E", &[Field::Str("a")]).unwrap();
        let b = canon::encode("E", &[Field::Str("b")]).unwrap();
        assert_ne!(chain_hash(&ZERO_HASH, &a), chain_hash(&ZERO_HASH, &b));
        assert_ne!(chain_hash(&ZERO_HASH, &a), chain_hash(&[1; 32], &a));
    }

    #[test]
    fn combine_is_order_independent_and_rejects_same_holder() {
        let mut rng = rng();
        let c = KeyShare::generate(Custodian::Controller, &mut rng);
        let r = KeyShare::generate(Custodian::Regulator, &mut rng);
        assert_eq!(combine_shares(&c, &r).unwrap(), combine_shares(&r, &c).unwrap());
        assert_eq!(combine_shares(&c, &c), Err(CustodyError::SameHolder(Custodian::Controller)));
    }

    #[test]
    fn zeroed_share_cannot_decrypt() {
        let mut rng = rng();
        let c = KeyShare::generate(Custodian::Controller, &mut rng);
        let r = KeyShare::generate(Custodian::Regulator, &mut rng);
        let key = combine_shares(&c, &r).unwrap();
        let nonce = record_nonce("rec-1");
        let ct = seal(&key, &nonce, b"aad", b"secret");
        assert_eq!(open(&key, &nonce, b"aad", &ct).unwrap(), b"secret");
        let zeroed = KeyShare { share: [0; 32], holder: Custodian::Regulator };
        let wrong = combine_shares(&c, &zeroed).unwrap();
        assert_eq!(open(&wrong, &nonce, b"aad", &ct), Err(DecryptFailure));
        assert_eq!(open(&key, &nonce, b"other", &ct), Err(DecryptFailure));
    }

    #[test]
    fn share_debug_is_redacted() {
        let share = KeyShare { share: [0xab; 32], holder: Custodian::Regulator };
        let shown = alloc::format!("{share:?}");
        assert!(!shown.contains("ab"), "{shown}");
    }

    #[test]
    fn hex_round_trip() {
        assert_eq!(to_hex(&[0x00, 0xff, 0x1a]), "00ff1a");
        assert_eq!(from_hex("00ff1a").unwrap(), [0x00, 0xff, 0x1a]);
        assert!(from_hex("0g").is_none());
        assert!(from_hex("abc").is_none());
    }
}
