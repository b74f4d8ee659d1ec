//! Untrusted blob storage for encrypted shards, checkpoints, and masks.
//!
//! Puts are immutable: a key can be written once, and a repeated put of the
//! same bytes is accepted so that retried iterations stay idempotent. Two
//! backends share the [`BlobStore`] trait, an in-memory map and a directory
//! with one file per blob.
//!
//! Directory layout: `<root>/<percent-encoded key>.blob`, where the key is
//! rendered as `data/<owner>/<batch>`, `model/<epoch>/<batch>`,
//! `mask/<set>/<index>` or `metrics/<seq>` and every byte outside
//! `[A-Za-z0-9_-]` is written as `%XX`. File contents are exactly the
//! encrypted blob wire layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use crate::crypto::EncryptedBlob;

#[derive(Debug, Error)]
pub enum StorageError {
    #[error("blob {0} already exists with different contents")]
    Conflict(BlobKey),
    #[error("blob {0} not found")]
    NotFound(BlobKey),
    #[error("no model checkpoint stored")]
    NoModel,
    #[error("corrupt blob {key}: {reason}")]
    Corrupt { key: String, reason: String },
    #[error("storage I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Namespace {
    Data(usize),
    Model,
    Mask { set: u64, index: usize },
    Metrics,
}

/// Address of a blob. Model versions are (epoch, batch); other namespaces use
/// the second component as a scalar version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlobKey {
    pub namespace: Namespace,
    pub version: (u64, u64),
}

impl BlobKey {
    pub fn data(owner: usize, batch: u64) -> Self {
        Self {
            namespace: Namespace::Data(owner),
            version: (0, batch),
        }
    }

    pub fn model(epoch: u64, batch: u64) -> Self {
        Self {
            namespace: Namespace::Model,
            version: (epoch, batch),
        }
    }

    pub fn mask(set: u64, index: usize) -> Self {
        Self {
            namespace: Namespace::Mask { set, index },
            version: (0, 0),
        }
    }

    pub fn metrics(seq: u64) -> Self {
        Self {
            namespace: Namespace::Metrics,
            version: (0, seq),
        }
    }

    pub fn is_model(&self) -> bool {
        self.namespace == Namespace::Model
    }

    pub fn is_mask(&self) -> bool {
        matches!(self.namespace, Namespace::Mask { .. })
    }

    fn canonical(&self) -> String {
        match self.namespace {
            Namespace::Data(owner) => format!("data/{owner}/{}", self.version.1),
            Namespace::Model => format!("model/{}/{}", self.version.0, self.version.1),
            Namespace::Mask { set, index } => format!("mask/{set}/{index}"),
            Namespace::Metrics => format!("metrics/{}", self.version.1),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        let num = |i: usize| parts.get(i)?.parse::<u64>().ok();
        match *parts.first()? {
            "data" if parts.len() == 3 => Some(Self::data(num(1)? as usize, num(2)?)),
            "model" if parts.len() == 3 => Some(Self::model(num(1)?, num(2)?)),
            "mask" if parts.len() == 3 => Some(Self::mask(num(1)?, num(2)? as usize)),
            "metrics" if parts.len() == 2 => Some(Self::metrics(num(1)?)),
            _ => None,
        }
    }

    pub fn file_name(&self) -> String {
        let mut out = String::new();
        for b in self.canonical().bytes() {
            if b.is_ascii_alphanumeric() || b == b'_' || b == b'-' {
                out.push(b as char);
            } else {
                out.push_str(&format!("%{b:02X}"));
            }
        }
        out.push_str(".blob");
        out
    }

    pub fn from_file_name(name: &str) -> Option<Self> {
        let stem = name.strip_suffix(".blob")?;
        let mut bytes = Vec::with_capacity(stem.len());
        let mut it = stem.bytes();
        while let Some(b) = it.next() {
            if b == b'%' {
                let hi = it.next()?;
                let lo = it.next()?;
                let hex = [hi, lo];
                bytes.push(u8::from_str_radix(std::str::from_utf8(&hex).ok()?, 16).ok()?);
            } else {
                bytes.push(b);
            }
        }
        Self::parse(std::str::from_utf8(&bytes).ok()?)
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

pub trait BlobStore: Send + Sync {
    /// Stores the blob. Re-putting identical bytes is a no-op.
    fn put(&self, key: BlobKey, blob: &EncryptedBlob) -> Result<(), StorageError>;

    fn get(&self, key: &BlobKey) -> Result<EncryptedBlob, StorageError>;

    /// All keys, sorted.
    fn keys(&self) -> Result<Vec<BlobKey>, StorageError>;

    /// Raw stored bytes of one blob.
    fn raw(&self, key: &BlobKey) -> Result<Vec<u8>, StorageError>;

    fn list(&self, namespace: &Namespace) -> Result<Vec<BlobKey>, StorageError> {
        Ok(self
            .keys()?
            .into_iter()
            .filter(|k| &k.namespace == namespace)
            .collect())
    }

    fn latest_model(&self) -> Result<(BlobKey, EncryptedBlob), StorageError> {
        let key = self
            .list(&Namespace::Model)?
            .into_iter()
            .next_back()
            .ok_or(StorageError::NoModel)?;
        Ok((key, self.get(&key)?))
    }

    /// Keys whose stored bytes contain `needle`.
    fn scan(&self, needle: &[u8]) -> Result<Vec<BlobKey>, StorageError> {
        let mut hits = Vec::new();
        for key in self.keys()? {
            let raw = self.raw(&key)?;
            if !needle.is_empty() && raw.windows(needle.len()).any(|w| w == needle) {
                hits.push(key);
            }
        }
        Ok(hits)
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    blobs: RwLock<BTreeMap<BlobKey, Vec<u8>>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

fn decode(key: &BlobKey, raw: &[u8]) -> Result<EncryptedBlob, StorageError> {
    EncryptedBlob::from_bytes(raw).map_err(|e| StorageError::Corrupt {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

impl BlobStore for MemoryStore {
    fn put(&self, key: BlobKey, blob: &EncryptedBlob) -> Result<(), StorageError> {
        let bytes = blob.to_bytes();
        let mut blobs = self.blobs.write().unwrap();
        match blobs.get(&key) {
            Some(existing) if *existing == bytes => Ok(()),
            Some(_) => Err(StorageError::Conflict(key)),
            None => {
                blobs.insert(key, bytes);
                Ok(())
            }
        }
    }

    fn get(&self, key: &BlobKey) -> Result<EncryptedBlob, StorageError> {
        decode(key, &self.raw(key)?)
    }

    fn keys(&self) -> Result<Vec<BlobKey>, StorageError> {
        Ok(self.blobs.read().unwrap().keys().copied().collect())
    }

    fn raw(&self, key: &BlobKey) -> Result<Vec<u8>, StorageError> {
        self.blobs
            .read()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or(StorageError::NotFound(*key))
    }
}

#[derive(Debug)]
pub struct DirStore {
    root: PathBuf,
    write_lock: Mutex<()>,
}

impl DirStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, StorageError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            write_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &BlobKey) -> PathBuf {
        self.root.join(key.file_name())
    }
}

impl BlobStore for DirStore {
    fn put(&self, key: BlobKey, blob: &EncryptedBlob) -> Result<(), StorageError> {
        let bytes = blob.to_bytes();
        let path = self.path(&key);
        let _guard = self.write_lock.lock().unwrap();
        match fs::read(&path) {
            Ok(existing) if existing == bytes => return Ok(()),
            Ok(_) => return Err(StorageError::Conflict(key)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    fn get(&self, key: &BlobKey) -> Result<EncryptedBlob, StorageError> {
        decode(key, &self.raw(key)?)
    }

    fn keys(&self) -> Result<Vec<BlobKey>, StorageError> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let name = entry?.file_name();
            if let Some(key) = name.to_str().and_then(BlobKey::from_file_name) {
                keys.push(key);
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn raw(&self, key: &BlobKey) -> Result<Vec<u8>, StorageError> {
        fs::read(self.path(key)).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StorageError::NotFound(*key),
            _ => e.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{encrypt, keygen, KeyOwner};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn blob(tag: &[u8]) -> EncryptedBlob {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let key = keygen(KeyOwner::ModelOwner, &mut rng);
        encrypt(&key, tag, &mut rng)
    }

    fn suite(store: &dyn BlobStore) {
        let a = blob(b"a");
        let b = blob(b"b");
        store.put(BlobKey::model(0, 0), &a).unwrap();
        assert_eq!(store.get(&BlobKey::model(0, 0)).unwrap(), a);

        // idempotent re-put, conflicting re-put
        store.put(BlobKey::model(0, 0), &a).unwrap();
        assert!(matches!(
            store.put(BlobKey::model(0, 0), &b),
            Err(StorageError::Conflict(_))
        ));

        store.put(BlobKey::model(1, 0), &b).unwrap();
        store.put(BlobKey::model(0, 1), &a).unwrap();
        let (latest, got) = store.latest_model().unwrap();
        assert_eq!(latest, BlobKey::model(1, 0));
        assert_eq!(got, b);
        assert_eq!(
            store.list(&Namespace::Model).unwrap(),
            vec![BlobKey::model(0, 0), BlobKey::model(0, 1), BlobKey::model(1, 0)]
        );

        assert!(matches!(
            store.get(&BlobKey::mask(0, 3)),
            Err(StorageError::NotFound(_))
        ));
        assert!(store.list(&Namespace::Data(7)).unwrap().is_empty());

        store.put(BlobKey::data(2, 1), &a).unwrap();
        store.put(BlobKey::data(3, 0), &a).unwrap();
        store.put(BlobKey::mask(0, 1), &a).unwrap();
        assert_eq!(store.list(&Namespace::Data(2)).unwrap(), vec![BlobKey::data(2, 1)]);
        assert_eq!(store.list(&Namespace::Model).unwrap().len(), 3);
        assert_eq!(store.keys().unwrap().len(), 6);

        assert_eq!(store.scan(b"zzz-not-there").unwrap(), vec![]);
        let key_id = a.key_id.as_bytes().to_vec();
        assert!(!store.scan(&key_id).unwrap().is_empty());
    }

    #[test]
    fn memory_backend() {
        suite(&MemoryStore::new());
        let empty = MemoryStore::new();
        assert!(matches!(empty.latest_model(), Err(StorageError::NoModel)));
    }

    #[test]
    fn directory_backend() {
        let dir = tempfile::tempdir().unwrap();
        suite(&DirStore::open(dir.path()).unwrap());
        // a reopened store sees the same blobs
        let reopened = DirStore::open(dir.path()).unwrap();
        assert_eq!(reopened.keys().unwrap().len(), 6);
    }

    #[test]
    fn file_names_round_trip() {
        for key in [
            BlobKey::data(3, 9),
            BlobKey::model(2, 17),
            BlobKey::mask(40, 5),
            BlobKey::metrics(1),
        ] {
            let name = key.file_name();
            assert!(!name.contains('/'));
            assert_eq!(BlobKey::from_file_name(&name), Some(key));
        }
        assert_eq!(BlobKey::model(1, 2).file_name(), "model%2F1%2F2.blob");
        assert_eq!(BlobKey::from_file_name("junk.txt"), None);
    }

    #[test]
    fn concurrent_gets_agree() {
        let store = Arc::new(MemoryStore::new());
        let a = blob(b"shared");
        store.put(BlobKey::model(0, 0), &a).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let s = Arc::clone(&store);
                std::thread::spawn(move || s.get(&BlobKey::model(0, 0)).unwrap())
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), a);
        }
    }
}
