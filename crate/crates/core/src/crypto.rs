//! Authenticated encryption for everything that leaves an enclave.
//!
//! Blobs are sealed with ChaCha20-Poly1305. The key id is bound as associated
//! data, so relabelling a blob fails authentication just like a flipped
//! ciphertext bit does.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Mutex;

use chacha20poly1305::aead::{AeadInPlace, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce, Tag};
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensors::Reader;

/// An independent deterministic stream for `label` under a job seed.
pub fn derive_rng(seed: u64, label: &str) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

pub const KEY_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("blob sealed under key {blob} cannot be opened with key {key}")]
    WrongKey { key: String, blob: String },
    #[error("authentication failed for blob under key {0}")]
    AuthFailure(String),
    #[error("malformed blob: {0}")]
    Malformed(String),
    #[error("key id {0} already registered")]
    DuplicateKeyId(String),
}

/// Who a key belongs to, which also determines its id prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KeyOwner {
    DataOwner(usize),
    ModelOwner,
    MaskKey { set: u64, index: usize },
    SessionKey(String, String),
    PoolSecret,
}

impl fmt::Display for KeyOwner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyOwner::DataOwner(i) => write!(f, "data-{i}"),
            KeyOwner::ModelOwner => f.write_str("model"),
            KeyOwner::MaskKey { set, index } => write!(f, "mask-{set}-{index}"),
            KeyOwner::SessionKey(a, b) => write!(f, "session-{a}-{b}"),
            KeyOwner::PoolSecret => f.write_str("pool"),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey {
    key_id: String,
    bytes: [u8; KEY_LEN],
    owner: KeyOwner,
}

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymmetricKey")
            .field("key_id", &self.key_id)
            .field("owner", &self.owner)
            .finish_non_exhaustive()
    }
}

impl SymmetricKey {
    pub fn from_bytes(key_id: impl Into<String>, bytes: [u8; KEY_LEN], owner: KeyOwner) -> Self {
        Self {
            key_id: key_id.into(),
            bytes,
            owner,
        }
    }

    pub fn key_id(&self) -> &str {
        &self.key_id
    }

    pub fn owner(&self) -> &KeyOwner {
        &self.owner
    }

    pub fn bytes(&self) -> &[u8; KEY_LEN] {
        &self.bytes
    }
}

/// Draws fresh key material. The id is the owner tag plus a random suffix.
pub fn keygen<R: RngCore + CryptoRng>(owner: KeyOwner, rng: &mut R) -> SymmetricKey {
    let mut bytes = [0u8; KEY_LEN];
    rng.fill_bytes(&mut bytes);
    let mut suffix = [0u8; 4];
    rng.fill_bytes(&mut suffix);
    SymmetricKey {
        key_id: format!("{owner}#{}", hex::encode(suffix)),
        bytes,
        owner,
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct EncryptedBlob {
    pub key_id: String,
    pub nonce: [u8; NONCE_LEN],
    pub tag: [u8; TAG_LEN],
    pub ciphertext: Vec<u8>,
}

impl fmt::Debug for EncryptedBlob {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncryptedBlob")
            .field("key_id", &self.key_id)
            .field("nonce", &hex::encode(self.nonce))
            .field("len", &self.ciphertext.len())
            .finish()
    }
}

impl EncryptedBlob {
    /// Wire layout: key_id length u16 LE | key_id | nonce | tag | ciphertext.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&(self.key_id.len() as u16).to_le_bytes());
        out.extend_from_slice(self.key_id.as_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.tag);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn wire_len(&self) -> usize {
        sealed_len(self.key_id.len(), self.ciphertext.len())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let malformed = |e: crate::tensors::TensorError| CryptoError::Malformed(e.to_string());
        let mut rd = Reader::new(bytes);
        let id_len = rd.u16().map_err(malformed)? as usize;
        let key_id = std::str::from_utf8(rd.take(id_len).map_err(malformed)?)
            .map_err(|e| CryptoError::Malformed(e.to_string()))?
            .to_owned();
        let nonce = rd.take(NONCE_LEN).map_err(malformed)?.try_into().unwrap();
        let tag = rd.take(TAG_LEN).map_err(malformed)?.try_into().unwrap();
        Ok(Self {
            key_id,
            nonce,
            tag,
            ciphertext: rd.rest().to_vec(),
        })
    }
}

/// Size on the wire of a blob with the given key id and plaintext lengths.
pub fn sealed_len(key_id_len: usize, plaintext_len: usize) -> usize {
    2 + key_id_len + NONCE_LEN + TAG_LEN + plaintext_len
}

pub fn encrypt<R: RngCore + CryptoRng>(
    key: &SymmetricKey,
    plaintext: &[u8],
    rng: &mut R,
) -> EncryptedBlob {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    encrypt_with_nonce(key, plaintext, nonce)
}

pub fn encrypt_with_nonce(
    key: &SymmetricKey,
    plaintext: &[u8],
    nonce: [u8; NONCE_LEN],
) -> EncryptedBlob {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.bytes));
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(&nonce), key.key_id.as_bytes(), &mut buf)
        .expect("plaintext within ChaCha20-Poly1305 length limit");
    EncryptedBlob {
        key_id: key.key_id.clone(),
        nonce,
        tag: tag.into(),
        ciphertext: buf,
    }
}

pub fn decrypt(key: &SymmetricKey, blob: &EncryptedBlob) -> Result<Vec<u8>, CryptoError> {
    if key.key_id != blob.key_id {
        return Err(CryptoError::WrongKey {
            key: key.key_id.clone(),
            blob: blob.key_id.clone(),
        });
    }
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key.bytes));
    let mut buf = blob.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&blob.nonce),
            blob.key_id.as_bytes(),
            &mut buf,
            Tag::from_slice(&blob.tag),
        )
        .map_err(|_| CryptoError::AuthFailure(blob.key_id.clone()))?;
    Ok(buf)
}

/// Insert-once key store.
#[derive(Debug, Default)]
pub struct KeyRegistry {
    keys: Mutex<HashMap<String, SymmetricKey>>,
}

impl KeyRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, key: SymmetricKey) -> Result<(), CryptoError> {
        let mut keys = self.keys.lock().unwrap();
        if keys.contains_key(&key.key_id) {
            return Err(CryptoError::DuplicateKeyId(key.key_id));
        }
        keys.insert(key.key_id.clone(), key);
        Ok(())
    }

    pub fn get(&self, key_id: &str) -> Option<SymmetricKey> {
        self.keys.lock().unwrap().get(key_id).cloned()
    }

    pub fn len(&self) -> usize {
        self.keys.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Records every (key id, nonce) pair used during a job.
#[derive(Debug, Default)]
pub struct NonceLedger {
    seen: Mutex<HashSet<(String, [u8; NONCE_LEN])>>,
    reused: Mutex<Vec<(String, [u8; NONCE_LEN])>>,
}

impl NonceLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false if the pair was seen before.
    pub fn record(&self, blob: &EncryptedBlob) -> bool {
        let pair = (blob.key_id.clone(), blob.nonce);
        let fresh = self.seen.lock().unwrap().insert(pair.clone());
        if !fresh {
            self.reused.lock().unwrap().push(pair);
        }
        fresh
    }

    pub fn reuse_count(&self) -> usize {
        self.reused.lock().unwrap().len()
    }

    pub fn len(&self) -> usize {
        self.seen.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(42)
    }

    #[test]
    fn keygen_distinct_and_deterministic() {
        let mut r = rng();
        let a = keygen(KeyOwner::ModelOwner, &mut r);
        let b = keygen(KeyOwner::ModelOwner, &mut r);
        assert_ne!(a.bytes(), b.bytes());
        assert_ne!(a.key_id(), b.key_id());
        let again = keygen(KeyOwner::ModelOwner, &mut rng());
        assert_eq!(a, again);
    }

    #[test]
    fn registry_rejects_duplicate_ids() {
        let reg = KeyRegistry::new();
        let k = keygen(KeyOwner::DataOwner(0), &mut rng());
        reg.insert(k.clone()).unwrap();
        assert_eq!(
            reg.insert(k.clone()),
            Err(CryptoError::DuplicateKeyId(k.key_id().to_owned()))
        );
        assert_eq!(reg.get(k.key_id()), Some(k));
    }

    #[test]
    fn round_trip_sizes() {
        let mut r = rng();
        let key = keygen(KeyOwner::DataOwner(1), &mut r);
        for size in [0usize, 1, 16, 4096, 1 << 20] {
            let mut p = vec![0u8; size];
            r.fill(&mut p[..]);
            let blob = encrypt(&key, &p, &mut r);
            assert_eq!(blob.ciphertext.len(), size);
            let wire = blob.to_bytes();
            assert_eq!(wire.len(), blob.wire_len());
            let back = EncryptedBlob::from_bytes(&wire).unwrap();
            assert_eq!(decrypt(&key, &back).unwrap(), p);
        }
    }

    #[test]
    fn single_bit_flips_fail_authentication() {
        let mut r = rng();
        let key = keygen(KeyOwner::ModelOwner, &mut r);
        let blob = encrypt(&key, b"model weights go here, 64 bytes or so of them.", &mut r);
        let wire = blob.to_bytes();
        let header = 2 + blob.key_id.len();
        for _ in 0..100 {
            let mut bytes = wire.clone();
            let pos = r.gen_range(header..bytes.len());
            bytes[pos] ^= 1 << r.gen_range(0..8);
            let tampered = EncryptedBlob::from_bytes(&bytes).unwrap();
            assert_eq!(
                decrypt(&key, &tampered),
                Err(CryptoError::AuthFailure(key.key_id().to_owned()))
            );
        }
    }

    #[test]
    fn wrong_owner_key_is_rejected_not_garbled() {
        let mut r = rng();
        let k0 = keygen(KeyOwner::DataOwner(0), &mut r);
        let k1 = keygen(KeyOwner::DataOwner(1), &mut r);
        let blob = encrypt(&k0, b"shard", &mut r);
        assert!(matches!(decrypt(&k1, &blob), Err(CryptoError::WrongKey { .. })));
        // same id, different material: still an auth failure
        let forged = SymmetricKey::from_bytes(k0.key_id(), *k1.bytes(), KeyOwner::DataOwner(0));
        assert!(matches!(decrypt(&forged, &blob), Err(CryptoError::AuthFailure(_))));
    }

    #[test]
    fn relabelled_blob_fails() {
        let mut r = rng();
        let k = keygen(KeyOwner::ModelOwner, &mut r);
        let mut blob = encrypt(&k, b"abc", &mut r);
        blob.key_id.push('x');
        let k2 = SymmetricKey::from_bytes(blob.key_id.clone(), *k.bytes(), KeyOwner::ModelOwner);
        assert!(matches!(decrypt(&k2, &blob), Err(CryptoError::AuthFailure(_))));
    }

    #[test]
    fn truncated_blob_is_malformed() {
        let blob = encrypt(&keygen(KeyOwner::ModelOwner, &mut rng()), b"x", &mut rng());
        let wire = blob.to_bytes();
        assert!(matches!(
            EncryptedBlob::from_bytes(&wire[..10]),
            Err(CryptoError::Malformed(_))
        ));
    }

    #[test]
    fn nonce_ledger_flags_reuse() {
        let key = keygen(KeyOwner::ModelOwner, &mut rng());
        let ledger = NonceLedger::new();
        let a = encrypt_with_nonce(&key, b"a", [1; NONCE_LEN]);
        let b = encrypt_with_nonce(&key, b"b", [1; NONCE_LEN]);
        assert!(ledger.record(&a));
        assert!(!ledger.record(&b));
        assert_eq!(ledger.reuse_count(), 1);
    }
}
