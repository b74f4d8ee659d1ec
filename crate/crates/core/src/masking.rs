//! Zero-sum masks.
//!
//! The admin enclave generates sets of `n` masks whose sum is the group zero,
//! encrypts every mask under its own key, and parks the ciphertexts in
//! untrusted storage before training starts. During training it only hands
//! out blob addresses and key grants. When stragglers drop out, the last
//! participant receives a residual mask that restores the zero sum for the
//! reduced group.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cas::{Cas, CasError, SecretId};
use crate::crypto::{encrypt, keygen, KeyOwner, SymmetricKey};
use crate::storage::{BlobKey, BlobStore, StorageError};
use crate::tensors::{fold, Domain, GradVector, TensorError};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask pool exhausted: iteration {iteration} but only {pool_size} sets were generated")]
    PoolExhausted { iteration: u64, pool_size: u64 },
    #[error("mask ({set}, {index}) already claimed by {holder}")]
    DoubleClaim {
        set: u64,
        index: usize,
        holder: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone)]
pub struct MaskSet {
    pub set_index: u64,
    pub masks: Vec<GradVector>,
    pub keys: Vec<SymmetricKey>,
}

impl MaskSet {
    pub fn n(&self) -> usize {
        self.masks.len()
    }
}

fn sample_mask<R: Rng>(
    shape: &[usize],
    domain: Domain,
    frac_bits: u8,
    rng: &mut R,
) -> Result<GradVector, TensorError> {
    let len: usize = shape.iter().sum();
    match domain {
        Domain::Fixed64 => {
            GradVector::from_residues((0..len).map(|_| rng.gen()).collect(), shape.to_vec(), frac_bits)
        }
        Domain::Float32 => GradVector::from_f32(
            (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            shape.to_vec(),
        ),
    }
}

/// Draws `n - 1` masks and appends the negation of their sum.
pub fn generate_mask_set<R: RngCore + rand::CryptoRng>(
    set_index: u64,
    n: usize,
    shape: &[usize],
    domain: Domain,
    frac_bits: u8,
    rng: &mut R,
) -> Result<MaskSet, MaskError> {
    if n == 0 {
        return Err(MaskError::InvalidArgument("a mask set needs n >= 1".into()));
    }
    let mut masks = (0..n - 1)
        .map(|_| sample_mask(shape, domain, frac_bits, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let last = match fold(&masks)? {
        Some(sum) => sum.negate(),
        None => GradVector::zeros(domain, shape.to_vec(), frac_bits)?,
    };
    masks.push(last);
    let keys = (0..n)
        .map(|index| {
            keygen(
                KeyOwner::MaskKey {
                    set: set_index,
                    index,
                },
                rng,
            )
        })
        .collect();
    Ok(MaskSet {
        set_index,
        masks,
        keys,
    })
}

/// Sum of the masks of every non-participant plus the last participant's own
/// mask. Added by the last participant in place of its own mask, it makes the
/// participants' masks sum to zero.
pub fn residual_mask(set: &MaskSet, participants: &[usize]) -> Result<GradVector, MaskError> {
    let (&last, _) = participants
        .split_last()
        .ok_or_else(|| MaskError::InvalidArgument("no participants".into()))?;
    let unique: BTreeSet<usize> = participants.iter().copied().collect();
    if unique.len() != participants.len() {
        return Err(MaskError::InvalidArgument(format!(
            "duplicate participants in {participants:?}"
        )));
    }
    if let Some(bad) = unique.iter().find(|&&i| i >= set.n()) {
        return Err(MaskError::InvalidArgument(format!(
            "participant {bad} outside a set of {}",
            set.n()
        )));
    }
    let contributing = (0..set.n())
        .filter(|i| *i == last || !unique.contains(i))
        .map(|i| &set.masks[i]);
    Ok(fold(contributing)?.expect("last participant always contributes"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrant {
    pub set: u64,
    pub index: usize,
    pub blob: BlobKey,
    pub secret: SecretId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayout {
    pub sets: u64,
    pub n: usize,
    pub domain: Domain,
    pub frac_bits: u8,
}

/// Pregenerated mask sets. Set `s` serves iteration `s`; each set is derived
/// from the pool secret so a restarted admin can rebuild it.
#[derive(Debug)]
pub struct MaskPool {
    layout: PoolLayout,
    shape: Vec<usize>,
    secret: SymmetricKey,
    next_unused: u64,
    claims: BTreeMap<(u64, usize), String>,
}

fn set_rng(secret: &SymmetricKey, label: &str, set: u64, extra: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(secret.bytes());
    h.update(label.as_bytes());
    h.update(set.to_le_bytes());
    h.update(extra.to_le_bytes());
    ChaCha20Rng::from_seed(h.finalize().into())
}

impl MaskPool {
    /// Generates `layout.sets` mask sets, stores each mask encrypted under
    /// its own key at `Mask(set, index)`, and registers the keys with the CAS
    /// for release to training enclave `index` only.
    pub fn pregenerate<R: RngCore + rand::CryptoRng>(
        layout: PoolLayout,
        shape: &[usize],
        rng: &mut R,
        store: &dyn BlobStore,
        cas: &mut Cas,
        admin_id: &str,
    ) -> Result<Self, MaskError> {
        if layout.n == 0 {
            return Err(MaskError::InvalidArgument("n must be >= 1".into()));
        }
        let secret = keygen(KeyOwner::PoolSecret, rng);
        cas.register_pool_secret(admin_id, secret.clone())?;
        let pool = Self::recover(layout, shape, secret, 0);
        for s in 0..layout.sets {
            let (set, mut rng) = pool.derive_set(s)?;
            for (index, (mask, key)) in set.masks.iter().zip(&set.keys).enumerate() {
                let blob = encrypt(key, &mask.serialize(), &mut rng);
                store.put(BlobKey::mask(s, index), &blob)?;
                cas.register_mask_key(
                    admin_id,
                    SecretId::MaskKey { set: s, index },
                    key.clone(),
                    index,
                )?;
            }
        }
        Ok(pool)
    }

    /// Rebuilds pool state from the pool secret, e.g. after an admin restart.
    pub fn recover(layout: PoolLayout, shape: &[usize], secret: SymmetricKey, cursor: u64) -> Self {
        Self {
            layout,
            shape: shape.to_vec(),
            secret,
            next_unused: cursor,
            claims: BTreeMap::new(),
        }
    }

    fn derive_set(&self, s: u64) -> Result<(MaskSet, ChaCha20Rng), MaskError> {
        let mut rng = set_rng(&self.secret, "mask-set", s, 0);
        let set = generate_mask_set(
            s,
            self.layout.n,
            &self.shape,
            self.layout.domain,
            self.layout.frac_bits,
            &mut rng,
        )?;
        Ok((set, rng))
    }

    pub fn mask_set(&self, s: u64) -> Result<MaskSet, MaskError> {
        self.check_available(s)?;
        Ok(self.derive_set(s)?.0)
    }

    pub fn layout(&self) -> PoolLayout {
        self.layout
    }

    pub fn next_unused(&self) -> u64 {
        self.next_unused
    }

    fn check_available(&self, iteration: u64) -> Result<(), MaskError> {
        if iteration >= self.layout.sets {
            return Err(MaskError::PoolExhausted {
                iteration,
                pool_size: self.layout.sets,
            });
        }
        Ok(())
    }

    /// Hands out the address and key grant of mask `(iteration, index)`.
    /// Repeated requests from the same enclave get the same grant.
    pub fn serve_mask_request(
        &mut self,
        iteration: u64,
        enclave_index: usize,
        requester: &str,
    ) -> Result<MaskGrant, MaskError> {
        self.check_available(iteration)?;
        if enclave_index >= self.layout.n {
            return Err(MaskError::InvalidArgument(format!(
                "enclave index {enclave_index} outside a set of {}",
                self.layout.n
            )));
        }
        if iteration + 1 < self.next_unused {
            return Err(MaskError::InvalidArgument(format!(
                "set {iteration} belongs to a finished iteration (cursor {})",
                self.next_unused
            )));
        }
        match self.claims.get(&(iteration, enclave_index)) {
            Some(holder) if holder != requester => {
                return Err(MaskError::DoubleClaim {
                    set: iteration,
                    index: enclave_index,
                    holder: holder.clone(),
                })
            }
            Some(_) => {}
            None => {
                self.claims
                    .insert((iteration, enclave_index), requester.to_owned());
            }
        }
        self.next_unused = self.next_unused.max(iteration + 1);
        Ok(MaskGrant {
            set: iteration,
            index: enclave_index,
            blob: BlobKey::mask(iteration, enclave_index),
            secret: SecretId::MaskKey {
                set: iteration,
                index: enclave_index,
            },
        })
    }

    /// Hands a slot over to a replacement enclave after a crash.
    pub fn rebind(&mut self, enclave_index: usize, requester: &str) {
        for ((_, index), holder) in self.claims.iter_mut() {
            if *index == enclave_index {
                *holder = requester.to_owned();
            }
        }
    }

    /// Builds, encrypts and stores the residual for `participants` of
    /// iteration `set`, registers its key for the last participant, and
    /// returns the grant. The residual lives in slot `n + attempt`.
    pub fn issue_residual(
        &mut self,
        set: u64,
        attempt: u64,
        participants: &[usize],
        store: &dyn BlobStore,
        cas: &mut Cas,
        admin_id: &str,
    ) -> Result<MaskGrant, MaskError> {
        let masks = self.mask_set(set)?;
        let residual = residual_mask(&masks, participants)?;
        let recipient = *participants.last().expect("checked by residual_mask");
        let index = self.layout.n + attempt as usize;
        let secret = SecretId::MaskKey { set, index };
        let mut rng = set_rng(&self.secret, "residual", set, attempt);
        let key = keygen(secret.key_owner(), &mut rng);
        let blob = encrypt(&key, &residual.serialize(), &mut rng);
        let addr = BlobKey::mask(set, index);
        store.put(addr, &blob)?;
        if !cas.has_secret(&secret) {
            cas.register_mask_key(admin_id, secret.clone(), key, recipient)?;
        }
        self.claims.insert((set, recipient), format!("residual:{recipient}"));
        Ok(MaskGrant {
            set,
            index,
            blob: addr,
            secret,
        })
    }
}
