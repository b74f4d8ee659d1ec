//! Training, aggregator and admin enclaves as single-threaded actors.
//!
//! Actors never block: a handler runs at the current simulated time, does its
//! work, and returns [`Action`]s stamped with the time their effect becomes
//! visible. The simulator turns those into events.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::aggregation::{build_tree_plan, Target, TreePlan};
use crate::cas::{
    Cas, CasError, CodeIdentity, CodeMeasurement, Measurements, Role, SecretId,
};
use crate::config::{FaultAction, JobConfig, JobMode};
use crate::costmodel::{CostParams, SimTime};
use crate::crypto::{decrypt, derive_rng, encrypt, CryptoError, EncryptedBlob, SymmetricKey};
use crate::masking::{MaskError, MaskPool, PoolLayout};
use crate::models::{apply_update, compute_gradients, Batch, ModelError, ModelSpec, ModelState};
use crate::storage::{BlobKey, BlobStore, StorageError};
use crate::tensors::{payload_len, Domain, FixedPointConfig, GradVector, Reader, TensorError};

pub const FRAME_MAGIC: &[u8; 4] = b"CMSG";
pub const CODE_VERSION: &str = "1.0.0";

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("privacy violation: {0}")]
    Privacy(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Cas(#[from] CasError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

// ---------------------------------------------------------------------------
// taint labels

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaintLabel {
    RawData(usize),
    RawGradient(usize),
    /// A single enclave's masked update.
    Masked(usize),
    PartialAggregate(BTreeSet<usize>),
    FullAggregate,
    ModelWeights,
    MaskMaterial,
    Control,
}

impl TaintLabel {
    pub fn code(&self) -> u8 {
        match self {
            TaintLabel::RawData(_) => 0,
            TaintLabel::RawGradient(_) => 1,
            TaintLabel::Masked(_) => 2,
            TaintLabel::PartialAggregate(_) => 3,
            TaintLabel::FullAggregate => 4,
            TaintLabel::ModelWeights => 5,
            TaintLabel::MaskMaterial => 6,
            TaintLabel::Control => 7,
        }
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, TaintLabel::RawData(_) | TaintLabel::RawGradient(_))
    }

    fn members(&self) -> Option<BTreeSet<usize>> {
        match self {
            TaintLabel::RawGradient(i) | TaintLabel::Masked(i) => Some(BTreeSet::from([*i])),
            TaintLabel::PartialAggregate(s) => Some(s.clone()),
            _ => None,
        }
    }

    /// Label of `self + other`. Sums covering every participant become
    /// [`TaintLabel::FullAggregate`].
    pub fn add(&self, other: &Self, participants: &BTreeSet<usize>) -> Result<Self, EnclaveError> {
        use TaintLabel::*;
        let mixed = || {
            EnclaveError::Privacy(format!("cannot combine {self} with {other}"))
        };
        let sum = match (self, other) {
            (RawGradient(i), MaskMaterial) | (MaskMaterial, RawGradient(i)) => {
                return Ok(Masked(*i))
            }
            (Masked(_), RawGradient(_)) | (RawGradient(_), Masked(_)) => return Err(mixed()),
            (a, b) => match (a.members(), b.members()) {
                (Some(x), Some(y)) if x.is_disjoint(&y) => x.union(&y).copied().collect(),
                _ => return Err(mixed()),
            },
        };
        Ok(Self::promote(PartialAggregate(sum), participants))
    }

    fn promote(label: Self, participants: &BTreeSet<usize>) -> Self {
        match label.members() {
            Some(m) if !participants.is_empty() && m.is_superset(participants) => {
                TaintLabel::FullAggregate
            }
            _ => label,
        }
    }

    /// Label of a fold over `labels`.
    pub fn fold<'a>(
        labels: impl IntoIterator<Item = &'a TaintLabel>,
        participants: &BTreeSet<usize>,
    ) -> Result<Self, EnclaveError> {
        let mut it = labels.into_iter();
        let first = it
            .next()
            .ok_or_else(|| EnclaveError::Protocol("fold of nothing".into()))?
            .clone();
        let mut acc = Self::promote(first, participants);
        for l in it {
            acc = acc.add(l, participants)?;
        }
        Ok(acc)
    }
}

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaintLabel::RawData(i) => write!(f, "RawData({i})"),
            TaintLabel::RawGradient(i) => write!(f, "RawGradient({i})"),
            TaintLabel::Masked(i) => write!(f, "Masked({i})"),
            TaintLabel::PartialAggregate(s) => {
                let ids: Vec<String> = s.iter().map(|i| i.to_string()).collect();
                write!(f, "PartialAggregate({})", ids.join("+"))
            }
            TaintLabel::FullAggregate => f.write_str("FullAggregate"),
            TaintLabel::ModelWeights => f.write_str("ModelWeights"),
            TaintLabel::MaskMaterial => f.write_str("MaskMaterial"),
            TaintLabel::Control => f.write_str("Control"),
        }
    }
}

/// Whether a message with label code `code` may be delivered to `role`.
pub fn admissible(role: Role, code: u8) -> bool {
    match role {
        Role::Aggregator => matches!(code, 2 | 4 | 7),
        Role::Admin => code == 7,
        Role::Training(_) => code != 0,
    }
}

// ---------------------------------------------------------------------------
// messages and frames

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MsgType {
    MaskReq = 1,
    MaskGrant = 2,
    Update = 3,
    Partial = 4,
    ModelReady = 5,
    Control = 6,
}

impl MsgType {
    fn from_u8(b: u8) -> Result<Self, EnclaveError> {
        Ok(match b {
            1 => MsgType::MaskReq,
            2 => MsgType::MaskGrant,
            3 => MsgType::Update,
            4 => MsgType::Partial,
            5 => MsgType::ModelReady,
            6 => MsgType::Control,
            _ => return Err(EnclaveError::Protocol(format!("unknown message type {b}"))),
        })
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    MaskReq { index: u32 },
    /// `None` tells a straggler it was cut from the iteration.
    MaskGrant { grant: Option<(u64, u32)> },
    Update { from: u32, round: u32, vector: GradVector },
    Partial { from: u32, round: u32, vector: GradVector },
    ModelReady,
    Control { participants: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub step: u64,
    pub attempt: u64,
    pub body: Body,
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self.body {
            Body::MaskReq { .. } => MsgType::MaskReq,
            Body::MaskGrant { .. } => MsgType::MaskGrant,
            Body::Update { .. } => MsgType::Update,
            Body::Partial { .. } => MsgType::Partial,
            Body::ModelReady => MsgType::ModelReady,
            Body::Control { .. } => MsgType::Control,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.attempt.to_le_bytes());
        match &self.body {
            Body::MaskReq { index } => out.extend_from_slice(&index.to_le_bytes()),
            Body::MaskGrant { grant } => {
                let (set, index) = grant.unwrap_or((0, 0));
                out.push(grant.is_some() as u8);
                out.extend_from_slice(&set.to_le_bytes());
                out.extend_from_slice(&index.to_le_bytes());
            }
            Body::Update {
                from,
                round,
                vector,
            }
            | Body::Partial {
                from,
                round,
                vector,
            } => {
                out.extend_from_slice(&from.to_le_bytes());
                out.extend_from_slice(&round.to_le_bytes());
                out.extend_from_slice(&vector.serialize());
            }
            Body::ModelReady => {}
            Body::Control { participants } => {
                out.extend_from_slice(&(participants.len() as u32).to_le_bytes());
                for p in participants {
                    out.extend_from_slice(&p.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(msg_type: MsgType, bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut rd = Reader::new(bytes);
        let step = rd.u64()?;
        let attempt = rd.u64()?;
        let body = match msg_type {
            MsgType::MaskReq => Body::MaskReq { index: rd.u32()? },
            MsgType::MaskGrant => {
                let present = rd.u8()?;
                let set = rd.u64()?;
                let index = rd.u32()?;
                Body::MaskGrant {
                    grant: (present == 1).then_some((set, index)),
                }
            }
            MsgType::Update | MsgType::Partial => {
                let from = rd.u32()?;
                let round = rd.u32()?;
                let vector = GradVector::deserialize(rd.rest())?;
                if msg_type == MsgType::Update {
                    Body::Update {
                        from,
                        round,
                        vector,
                    }
                } else {
                    Body::Partial {
                        from,
                        round,
                        vector,
                    }
                }
            }
            MsgType::ModelReady => Body::ModelReady,
            MsgType::Control => {
                let count = rd.u32()? as usize;
                let participants = (0..count).map(|_| rd.u32()).collect::<Result<_, _>>()?;
                Body::Control { participants }
            }
        };
        if rd.remaining() != 0 {
            return Err(EnclaveError::Protocol(format!(
                "{} trailing bytes in {msg_type}",
                rd.remaining()
            )));
        }
        Ok(Self {
            step,
            attempt,
            body,
        })
    }
}

/// Encoded length of an update or partial carrying a vector of this shape.
pub fn contribution_len(domain: Domain, shape: &[usize]) -> usize {
    8 + 8 + 4 + 4 + payload_len(domain, shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    /// Present only with the `taint-labels` feature.
    pub label: Option<u8>,
    pub blob: EncryptedBlob,
}

impl Frame {
    pub fn new(msg_type: MsgType, label: &TaintLabel, blob: EncryptedBlob) -> Self {
        Self {
            msg_type,
            label: cfg!(feature = "taint-labels").then(|| label.code()),
            blob,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let blob = self.blob.to_bytes();
        let mut out = Vec::with_capacity(14 + blob.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.push(self.msg_type as u8);
        if cfg!(feature = "taint-labels") {
            out.push(self.label.unwrap_or(u8::MAX));
        }
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EnclaveError> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != FRAME_MAGIC {
            return Err(EnclaveError::Protocol("bad frame magic".into()));
        }
        let msg_type = MsgType::from_u8(rd.u8()?)?;
        let label = if cfg!(feature = "taint-labels") {
            Some(rd.u8()?)
        } else {
            None
        };
        let len = rd.u64()? as usize;
        if rd.remaining() != len {
            return Err(EnclaveError::Protocol(format!(
                "frame declares {len} bytes, carries {}",
                rd.remaining()
            )));
        }
        Ok(Self {
            msg_type,
            label,
            blob: EncryptedBlob::from_bytes(rd.rest())?,
        })
    }
}

// ---------------------------------------------------------------------------
// code identities

fn identity(role: Role, version: &str) -> CodeIdentity {
    match role {
        Role::Training(_) => CodeIdentity::new(
            "training",
            version,
            &["BATCH_SIZE", "LR_SCHEDULE", "CLIP_NORM", "MODEL_WEIGHTS"],
        ),
        Role::Aggregator => {
            CodeIdentity::new("aggregator", version, &["LR_SCHEDULE", "CLIP_NORM", "MODEL_WEIGHTS"])
        }
        Role::Admin => CodeIdentity::new("admin", version, &["POOL_SIZE"]),
    }
}

/// The identity a role's enclave program is measured under. Hyperparameter
/// values are not part of it; they arrive after attestation.
pub fn code_identity(role: Role) -> CodeIdentity {
    identity(role, CODE_VERSION)
}

pub fn tampered_identity(role: Role) -> CodeIdentity {
    identity(role, "1.0.0+patched")
}

pub fn measurements() -> Measurements {
    Measurements {
        training: code_identity(Role::Training(0)).measure(),
        aggregator: code_identity(Role::Aggregator).measure(),
        admin: code_identity(Role::Admin).measure(),
    }
}

// ---------------------------------------------------------------------------
// job context, actions

/// Everything an enclave learns as dynamic configuration after attestation.
#[derive(Debug)]
pub struct JobContext {
    pub cfg: JobConfig,
    pub spec: ModelSpec,
    pub shape: Vec<usize>,
    pub fixed: FixedPointConfig,
    pub plan: Option<TreePlan>,
    pub costs: CostParams,
    /// Per round, each leader's children in ascending order.
    children: Vec<BTreeMap<usize, Vec<usize>>>,
}

impl JobContext {
    pub fn new(cfg: JobConfig) -> Result<Self, EnclaveError> {
        let spec = cfg.model_spec();
        let shape = spec.shape();
        let plan = match cfg.mode {
            JobMode::Tree => Some(
                build_tree_plan(cfg.n_training, cfg.children_c)
                    .map_err(|e| EnclaveError::Protocol(e.to_string()))?,
            ),
            _ => None,
        };
        let children = plan
            .as_ref()
            .map(|p| (0..p.rounds.len()).map(|r| p.children(r)).collect())
            .unwrap_or_default();
        let c = &cfg.costs;
        let costs = CostParams {
            net: cfg.latency.as_cost(),
            enc: c.enc,
            dec: c.dec,
            t_mask: c.t_mask,
            t_train: c.t_train,
            t_apply: c.t_apply,
            agg: c.agg,
            mask_bytes: payload_len(cfg.domain, &shape) as u64,
            update_bytes: contribution_len(cfg.domain, &shape) as u64,
        };
        Ok(Self {
            fixed: cfg.fixed_point(),
            spec,
            shape,
            plan,
            costs,
            children,
            cfg,
        })
    }

    pub fn n(&self) -> usize {
        self.cfg.n_training
    }

    pub fn batches_per_epoch(&self) -> u64 {
        self.cfg.batches_per_epoch
    }

    pub fn version_of(&self, step: u64) -> BlobKey {
        let bpe = self.batches_per_epoch();
        BlobKey::model(step / bpe, step % bpe)
    }

    fn all(&self) -> BTreeSet<usize> {
        (0..self.n()).collect()
    }

    fn g(&self) -> u64 {
        self.costs.update_bytes
    }
}

/// Encrypts a checkpoint with a nonce derived from its version, so the same
/// model state always produces the same blob.
pub fn seal_checkpoint(seed: u64, key: &SymmetricKey, state: &ModelState) -> EncryptedBlob {
    let mut rng = derive_rng(seed, &format!("checkpoint:{}/{}", state.epoch, state.batch));
    encrypt(key, &state.to_checkpoint(), &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Training,
    Masking,
    Aggregation,
    Recursive,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Masking => "masking",
            Phase::Aggregation => "aggregation",
            Phase::Recursive => "recursive",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WakeKind {
    TrainDone,
    RetryLoad,
    Commit,
    SspCutoff,
}

#[derive(Debug, Clone)]
pub struct Outgoing {
    pub at: SimTime,
    pub to: Role,
    pub msg_type: MsgType,
    pub label: TaintLabel,
    pub frame: Vec<u8>,
    /// Plaintext body length; drives the time charged for the transfer.
    pub logical: u64,
}

#[derive(Debug, Clone)]
pub struct Inbound {
    pub from: Role,
    pub from_id: String,
    pub label: TaintLabel,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Commit {
    pub step: u64,
    pub attempt: u64,
    /// Enclaves whose updates were folded, ascending.
    pub participants: Vec<usize>,
    pub aggregate: GradVector,
    pub label: TaintLabel,
    pub state: ModelState,
    pub version: BlobKey,
}

#[derive(Debug, Clone)]
pub enum Action {
    Send(Outgoing),
    Wake { at: SimTime, kind: WakeKind },
    Begun { step: u64, attempt: u64 },
    Committed(Box<Commit>),
    Abort { reason: String },
}

pub struct Env<'a> {
    pub now: SimTime,
    pub store: &'a dyn BlobStore,
    pub cas: &'a mut Cas,
    pub actions: &'a mut Vec<Action>,
}

impl Env<'_> {
    fn wake(&mut self, at: SimTime, kind: WakeKind) {
        self.actions.push(Action::Wake { at, kind });
    }
}

// ---------------------------------------------------------------------------
// enclave state

#[derive(Debug)]
pub struct EnclaveState {
    pub id: String,
    pub role: Role,
    pub measurement: CodeMeasurement,
    pub step: u64,
    pub attempt: u64,
    /// Whether `step`/`attempt` name an iteration this enclave has begun.
    pub active: bool,
    pub begun_at: SimTime,
    pub held_secrets: BTreeSet<SecretId>,
    pub messages_in: u64,
    pub messages_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    keys: BTreeMap<SecretId, SymmetricKey>,
    rng: ChaCha20Rng,
    seed: u64,
}

impl EnclaveState {
    pub fn new(id: &str, role: Role, measurement: CodeMeasurement, seed: u64) -> Self {
        Self {
            id: id.to_owned(),
            role,
            measurement,
            step: 0,
            attempt: 0,
            active: false,
            begun_at: 0,
            held_secrets: BTreeSet::new(),
            messages_in: 0,
            messages_out: 0,
            bytes_in: 0,
            bytes_out: 0,
            keys: BTreeMap::new(),
            rng: derive_rng(seed, &format!("enclave:{id}")),
            seed,
        }
    }

    fn begin(&mut self, env: &mut Env, step: u64, attempt: u64) {
        self.step = step;
        self.attempt = attempt;
        self.active = true;
        self.begun_at = env.now;
        env.actions.push(Action::Begun { step, attempt });
    }

    /// Obtains `secret` from the CAS, or from the local cache.
    pub fn secret(&mut self, cas: &mut Cas, secret: &SecretId) -> Result<SymmetricKey, EnclaveError> {
        if let Some(k) = self.keys.get(secret) {
            return Ok(k.clone());
        }
        let key = cas.provision(&self.id, secret)?;
        self.keys.insert(secret.clone(), key.clone());
        self.held_secrets.insert(secret.clone());
        Ok(key)
    }

    fn session(&mut self, cas: &mut Cas, peer: Role) -> Result<SymmetricKey, EnclaveError> {
        let secret = SecretId::session(self.role, peer);
        if let Some(k) = self.keys.get(&secret) {
            return Ok(k.clone());
        }
        let mut rng = derive_rng(self.seed, &format!("session:{secret}"));
        let key = cas.session_key(&self.id, peer, &mut rng)?;
        self.keys.insert(secret.clone(), key.clone());
        self.held_secrets.insert(secret);
        Ok(key)
    }

    fn send(
        &mut self,
        env: &mut Env,
        at: SimTime,
        to: Role,
        label: TaintLabel,
        body: Body,
    ) -> Result<(), EnclaveError> {
        let msg = Message {
            step: self.step,
            attempt: self.attempt,
            body,
        };
        let plain = msg.encode();
        let key = self.session(env.cas, to)?;
        let blob = encrypt(&key, &plain, &mut self.rng);
        let frame = Frame::new(msg.msg_type(), &label, blob).encode();
        self.messages_out += 1;
        self.bytes_out += frame.len() as u64;
        env.actions.push(Action::Send(Outgoing {
            at,
            to,
            msg_type: msg.msg_type(),
            label,
            frame,
            logical: plain.len() as u64,
        }));
        Ok(())
    }

    /// Checks, decrypts and decodes an inbound frame.
    fn open(&mut self, env: &mut Env, msg: &Inbound) -> Result<Message, EnclaveError> {
        self.messages_in += 1;
        self.bytes_in += msg.frame.len() as u64;
        let frame = Frame::decode(&msg.frame)?;
        if let Some(code) = frame.label {
            if code != msg.label.code() {
                return Err(EnclaveError::Protocol(format!(
                    "frame label {code} disagrees with {}",
                    msg.label
                )));
            }
            if !admissible(self.role, code) {
                return Err(EnclaveError::Privacy(format!(
                    "{} received {} labelled {} from {}",
                    self.id, frame.msg_type, msg.label, msg.from_id
                )));
            }
        }
        let key = self.session(env.cas, msg.from)?;
        let plain = decrypt(&key, &frame.blob)?;
        Message::decode(frame.msg_type, &plain)
    }

    /// Whether `msg` belongs to the iteration this enclave is running.
    fn current(&self, msg: &Message) -> bool {
        self.active && msg.step == self.step && msg.attempt == self.attempt
    }

    fn load_model(&mut self, env: &mut Env, ctx: &JobContext) -> Result<Option<ModelState>, EnclaveError> {
        let expected = ctx.version_of(self.step);
        let (key, blob) = match env.store.latest_model() {
            Ok(found) => found,
            Err(StorageError::NoModel) => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        if key < expected {
            return Ok(None);
        }
        let blob = if key == expected {
            blob
        } else {
            env.store.get(&expected)?
        };
        let model_key = self.secret(env.cas, &SecretId::ModelKey)?;
        let state = ModelState::from_checkpoint(&decrypt(&model_key, &blob)?)?;
        Ok(Some(state))
    }
}

/// Common interface the simulator drives.
pub trait Enclave {
    fn state(&self) -> &EnclaveState;
    fn begin(&mut self, env: &mut Env, step: u64, attempt: u64) -> Result<(), EnclaveError>;
    fn on_message(&mut self, env: &mut Env, msg: Inbound) -> Result<(), EnclaveError>;
    fn on_wake(&mut self, env: &mut Env, kind: WakeKind) -> Result<(), EnclaveError>;
    fn phase_at(&self, t: SimTime) -> Phase;
    /// Durations per phase; they sum to `end - begin`.
    fn breakdown(&self, begin: SimTime, end: SimTime) -> Vec<(Phase, SimTime)>;
}

fn backoff(ctx: &JobContext) -> SimTime {
    ctx.costs.net.base.max(1)
}

fn clamp(t: Option<SimTime>, lo: SimTime, hi: SimTime) -> SimTime {
    t.unwrap_or(hi).clamp(lo, hi)
}

// ---------------------------------------------------------------------------
// training enclave

#[derive(Debug, Default)]
struct TrainIter {
    gradient: Option<(GradVector, TaintLabel)>,
    trained_at: Option<SimTime>,
    masked_at: Option<SimTime>,
    grant: Option<Option<(u64, u32)>>,
    sent: bool,
    next_round: usize,
    ready_at: SimTime,
    /// round -> sender -> (partial, label, arrival)
    inbox: BTreeMap<usize, BTreeMap<usize, (GradVector, TaintLabel, SimTime)>>,
}

#[derive(Debug)]
pub struct TrainingEnclave {
    pub state: EnclaveState,
    index: usize,
    ctx: Arc<JobContext>,
    it: TrainIter,
}

impl TrainingEnclave {
    /// Builds the enclave after attestation and obtains its data and model keys.
    pub fn launch(
        id: &str,
        index: usize,
        measurement: CodeMeasurement,
        ctx: Arc<JobContext>,
        cas: &mut Cas,
    ) -> Result<Self, EnclaveError> {
        let mut state = EnclaveState::new(id, Role::Training(index), measurement, ctx.cfg.seed);
        state.secret(cas, &SecretId::DataKey(index))?;
        state.secret(cas, &SecretId::ModelKey)?;
        Ok(Self {
            state,
            index,
            ctx,
            it: TrainIter::default(),
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    /// The raw gradient of the current iteration, once computed.
    pub fn gradient(&self) -> Option<&GradVector> {
        self.it.gradient.as_ref().map(|(g, _)| g)
    }

    fn load(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let ctx = Arc::clone(&self.ctx);
        let Some(model) = self.state.load_model(env, &ctx)? else {
            env.wake(env.now + backoff(&ctx), WakeKind::RetryLoad);
            return Ok(());
        };
        let data_key = self.state.secret(env.cas, &SecretId::DataKey(self.index))?;
        let blob = env.store.get(&BlobKey::data(self.index, model.batch))?;
        let batch = Batch::from_bytes(&decrypt(&data_key, &blob)?)?;
        let grad = compute_gradients(&ctx.spec, &model, &batch)?;
        let g = GradVector::from_reals(&grad, ctx.shape.clone(), ctx.cfg.domain, &ctx.fixed)?;
        self.it.gradient = Some((g, TaintLabel::RawGradient(self.index)));
        let delay = ctx.cfg.delay_for(self.index, self.state.step);
        env.wake(env.now + ctx.costs.t_train + delay, WakeKind::TrainDone);
        Ok(())
    }

    fn request_mask(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let body = Body::MaskReq {
            index: self.index as u32,
        };
        self.state
            .send(env, env.now, Role::Admin, TaintLabel::Control, body)
    }

    fn mask_and_send(&mut self, env: &mut Env, set: u64, index: u32) -> Result<(), EnclaveError> {
        let ctx = Arc::clone(&self.ctx);
        let secret = SecretId::MaskKey {
            set,
            index: index as usize,
        };
        let key = self.state.secret(env.cas, &secret)?;
        let blob = env.store.get(&BlobKey::mask(set, index as usize))?;
        let mask = GradVector::deserialize(&decrypt(&key, &blob)?)?;
        let (g, label) = self.it.gradient.clone().expect("trained before masking");
        let c = &ctx.costs;
        let masked_at = env.now + c.net.at(c.mask_bytes) + c.dec.at(c.mask_bytes) + c.t_mask;
        self.it.masked_at = Some(masked_at);
        let leak = ctx.cfg.has_fault(
            self.state.role,
            self.state.step,
            FaultAction::LeakUnmasked,
        );
        let (vector, label) = if leak {
            (g, label)
        } else {
            (
                g.add(&mask)?,
                label.add(&TaintLabel::MaskMaterial, &ctx.all())?,
            )
        };
        self.it.sent = true;
        let body = Body::Update {
            from: self.index as u32,
            round: 0,
            vector,
        };
        self.state.send(
            env,
            masked_at + c.enc.at(ctx.g()),
            Role::Aggregator,
            label,
            body,
        )
    }

    fn tree_advance(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let ctx = Arc::clone(&self.ctx);
        let plan = ctx.plan.as_ref().expect("tree mode has a plan");
        let (send_round, target) = plan.send_of(self.index).expect("every participant sends");
        let c = &ctx.costs;
        let all = ctx.all();
        while self.it.next_round < send_round {
            let r = self.it.next_round;
            if let Some(kids) = ctx.children[r].get(&self.index) {
                let inbox = self.it.inbox.entry(r).or_default();
                if !kids.iter().all(|k| inbox.contains_key(k)) {
                    return Ok(());
                }
                let (mut acc, mut label) = self.it.gradient.take().expect("partial present");
                let mut start = self.it.ready_at;
                for k in kids {
                    let (v, l, arrived) = inbox.remove(k).expect("checked above");
                    acc = acc.add(&v)?;
                    label = label.add(&l, &all)?;
                    start = start.max(arrived + c.dec.at(ctx.g()));
                }
                self.it.ready_at = start + c.agg.at(kids.len() + 1);
                self.it.gradient = Some((acc, label));
            }
            self.it.next_round += 1;
        }
        if self.it.sent {
            return Ok(());
        }
        self.it.sent = true;
        let (vector, label) = self.it.gradient.clone().expect("partial present");
        let label = TaintLabel::fold([&label], &all)?;
        let at = self.it.ready_at + c.enc.at(ctx.g());
        let (from, round) = (self.index as u32, send_round as u32);
        match target {
            Target::Leader(l) => self.state.send(
                env,
                at,
                Role::Training(l),
                label,
                Body::Partial {
                    from,
                    round,
                    vector,
                },
            ),
            Target::Aggregator => self.state.send(
                env,
                at,
                Role::Aggregator,
                label,
                Body::Update {
                    from,
                    round,
                    vector,
                },
            ),
        }
    }
}

impl Enclave for TrainingEnclave {
    fn state(&self) -> &EnclaveState {
        &self.state
    }

    fn begin(&mut self, env: &mut Env, step: u64, attempt: u64) -> Result<(), EnclaveError> {
        self.state.begin(env, step, attempt);
        self.it = TrainIter::default();
        if self.ctx.cfg.mode == JobMode::Mask {
            // the grant round trip overlaps with training
            self.request_mask(env)?;
        }
        self.load(env)
    }

    fn on_message(&mut self, env: &mut Env, msg: Inbound) -> Result<(), EnclaveError> {
        let m = self.state.open(env, &msg)?;
        if m.msg_type() == MsgType::ModelReady {
            let newer = !self.state.active || (m.step, m.attempt) > (self.state.step, self.state.attempt);
            return if newer {
                self.begin(env, m.step, m.attempt)
            } else {
                Ok(())
            };
        }
        if !self.state.current(&m) {
            return Ok(());
        }
        match m.body {
            Body::MaskGrant { grant } => {
                self.it.grant = Some(grant);
                if let (Some((set, index)), Some(_), false) = (grant, self.it.trained_at, self.it.sent) {
                    self.mask_and_send(env, set, index)?;
                }
                Ok(())
            }
            Body::Partial {
                from,
                round,
                vector,
            } => {
                self.it
                    .inbox
                    .entry(round as usize)
                    .or_default()
                    .insert(from as usize, (vector, msg.label, env.now));
                if self.it.trained_at.is_some() {
                    self.tree_advance(env)?;
                }
                Ok(())
            }
            _ => Err(EnclaveError::Protocol(format!(
                "{} cannot handle {}",
                self.state.id,
                m.msg_type()
            ))),
        }
    }

    fn on_wake(&mut self, env: &mut Env, kind: WakeKind) -> Result<(), EnclaveError> {
        match kind {
            WakeKind::RetryLoad => self.load(env),
            WakeKind::TrainDone => {
                self.it.trained_at = Some(env.now);
                self.it.ready_at = env.now;
                match self.ctx.cfg.mode {
                    JobMode::Mask => match self.it.grant {
                        Some(Some((set, index))) => self.mask_and_send(env, set, index),
                        _ => Ok(()),
                    },
                    JobMode::MaskSsp => self.request_mask(env),
                    JobMode::Tree => self.tree_advance(env),
                }
            }
            _ => Ok(()),
        }
    }

    fn phase_at(&self, t: SimTime) -> Phase {
        let trained = self.it.trained_at.is_some_and(|x| t >= x);
        match (self.ctx.cfg.mode, trained) {
            (_, false) => Phase::Training,
            (JobMode::Tree, true) => Phase::Recursive,
            _ if self.it.masked_at.is_some_and(|x| t >= x) => Phase::Aggregation,
            _ => Phase::Masking,
        }
    }

    fn breakdown(&self, begin: SimTime, end: SimTime) -> Vec<(Phase, SimTime)> {
        let trained = clamp(self.it.trained_at, begin, end);
        if self.ctx.cfg.mode == JobMode::Tree {
            return vec![(Phase::Training, trained - begin), (Phase::Recursive, end - trained)];
        }
        let masked = clamp(self.it.masked_at, trained, end);
        vec![
            (Phase::Training, trained - begin),
            (Phase::Masking, masked - trained),
            (Phase::Aggregation, end - masked),
        ]
    }
}

// ---------------------------------------------------------------------------
// aggregator enclave

#[derive(Debug, Default)]
struct AggIter {
    model: Option<ModelState>,
    expected: Option<Vec<usize>>,
    received: BTreeMap<usize, (GradVector, TaintLabel, SimTime)>,
    inputs_at: Option<SimTime>,
    pending: Option<Commit>,
}

#[derive(Debug)]
pub struct AggregatorEnclave {
    pub state: EnclaveState,
    ctx: Arc<JobContext>,
    it: AggIter,
}

impl AggregatorEnclave {
    pub fn launch(
        id: &str,
        measurement: CodeMeasurement,
        ctx: Arc<JobContext>,
        cas: &mut Cas,
    ) -> Result<Self, EnclaveError> {
        let mut state = EnclaveState::new(id, Role::Aggregator, measurement, ctx.cfg.seed);
        state.secret(cas, &SecretId::ModelKey)?;
        Ok(Self {
            state,
            ctx,
            it: AggIter::default(),
        })
    }

    fn load(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let ctx = Arc::clone(&self.ctx);
        match self.state.load_model(env, &ctx)? {
            Some(m) => {
                self.it.model = Some(m);
                self.try_complete(env)
            }
            None => {
                env.wake(env.now + backoff(&ctx), WakeKind::RetryLoad);
                Ok(())
            }
        }
    }

    fn try_complete(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let ctx = Arc::clone(&self.ctx);
        if self.it.pending.is_some() || self.it.model.is_none() {
            return Ok(());
        }
        let Some(expected) = self.it.expected.clone() else {
            return Ok(());
        };
        if !expected.iter().all(|i| self.it.received.contains_key(i)) {
            return Ok(());
        }
        let participants: BTreeSet<usize> = match ctx.cfg.mode {
            JobMode::Tree => ctx.all(),
            _ => expected.iter().copied().collect(),
        };
        let mut sorted = expected.clone();
        sorted.sort_unstable();
        let items: Vec<&(GradVector, TaintLabel, SimTime)> =
            sorted.iter().map(|i| &self.it.received[i]).collect();
        let mut sum = items[0].0.clone();
        for (v, _, _) in &items[1..] {
            sum = sum.add(v)?;
        }
        let label = TaintLabel::fold(items.iter().map(|(_, l, _)| l), &participants)?;
        if label != TaintLabel::FullAggregate {
            return Err(EnclaveError::Privacy(format!(
                "aggregator would apply an update labelled {label}"
            )));
        }
        let last = items.iter().map(|(_, _, t)| *t).max().expect("non-empty");
        self.it.inputs_at = Some(last);
        let c = &ctx.costs;
        let model = self.it.model.as_ref().expect("checked above");
        let state = apply_update(
            &ctx.spec,
            model,
            &sum,
            participants.len(),
            &ctx.fixed,
            ctx.batches_per_epoch(),
        )?;
        let done = last + c.dec.at(ctx.g()) + c.agg.at(items.len()) + c.t_apply;
        self.it.pending = Some(Commit {
            step: self.state.step,
            attempt: self.state.attempt,
            participants: sorted,
            aggregate: sum,
            label,
            version: BlobKey::model(state.epoch, state.batch),
            state,
        });
        env.wake(done, WakeKind::Commit);
        Ok(())
    }

    fn commit(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        let Some(commit) = self.it.pending.take() else {
            return Ok(());
        };
        let key = self.state.secret(env.cas, &SecretId::ModelKey)?;
        let blob = seal_checkpoint(self.ctx.cfg.seed, &key, &commit.state);
        env.store.put(commit.version, &blob)?;
        let next = commit.step + 1;
        if next < self.ctx.cfg.iterations() {
            let mut peers: Vec<Role> = (0..self.ctx.n()).map(Role::Training).collect();
            if self.ctx.cfg.mode.uses_masks() {
                peers.push(Role::Admin);
            }
            for peer in peers {
                let msg = Message {
                    step: next,
                    attempt: 0,
                    body: Body::ModelReady,
                };
                self.send_ready(env, peer, msg)?;
            }
        }
        env.actions.push(Action::Committed(Box::new(commit)));
        Ok(())
    }

    fn send_ready(&mut self, env: &mut Env, to: Role, msg: Message) -> Result<(), EnclaveError> {
        let (step, attempt) = (self.state.step, self.state.attempt);
        self.state.step = msg.step;
        self.state.attempt = msg.attempt;
        let r = self
            .state
            .send(env, env.now, to, TaintLabel::Control, Body::ModelReady);
        self.state.step = step;
        self.state.attempt = attempt;
        r
    }
}

impl Enclave for AggregatorEnclave {
    fn state(&self) -> &EnclaveState {
        &self.state
    }

    fn begin(&mut self, env: &mut Env, step: u64, attempt: u64) -> Result<(), EnclaveError> {
        self.state.begin(env, step, attempt);
        self.it = AggIter {
            expected: match self.ctx.cfg.mode {
                JobMode::Mask => Some((0..self.ctx.n()).collect()),
                JobMode::Tree => Some(vec![0]),
                JobMode::MaskSsp => None,
            },
            ..AggIter::default()
        };
        self.load(env)
    }

    fn on_message(&mut self, env: &mut Env, msg: Inbound) -> Result<(), EnclaveError> {
        if !admissible(Role::Aggregator, msg.label.code()) {
            return Err(EnclaveError::Privacy(format!(
                "aggregator received a message labelled {} from {}",
                msg.label, msg.from_id
            )));
        }
        let m = self.state.open(env, &msg)?;
        if !self.state.current(&m) {
            return Ok(());
        }
        match m.body {
            Body::Update { from, vector, .. } => {
                self.it
                    .received
                    .insert(from as usize, (vector, msg.label, env.now));
            }
            Body::Control { participants } if msg.from == Role::Admin => {
                self.it.expected = Some(participants.iter().map(|&p| p as usize).collect());
            }
            _ => {
                return Err(EnclaveError::Protocol(format!(
                    "aggregator cannot handle {} from {}",
                    m.msg_type(),
                    msg.from_id
                )))
            }
        }
        self.try_complete(env)
    }

    fn on_wake(&mut self, env: &mut Env, kind: WakeKind) -> Result<(), EnclaveError> {
        match kind {
            WakeKind::RetryLoad => self.load(env),
            WakeKind::Commit => self.commit(env),
            _ => Ok(()),
        }
    }

    fn phase_at(&self, t: SimTime) -> Phase {
        match self.it.inputs_at {
            Some(x) if t >= x => Phase::Aggregation,
            _ if self.ctx.cfg.mode == JobMode::Tree => Phase::Recursive,
            _ => Phase::Training,
        }
    }

    fn breakdown(&self, begin: SimTime, end: SimTime) -> Vec<(Phase, SimTime)> {
        let inputs = clamp(self.it.inputs_at, begin, end);
        let wait = if self.ctx.cfg.mode == JobMode::Tree {
            Phase::Recursive
        } else {
            Phase::Training
        };
        vec![(wait, inputs - begin), (Phase::Aggregation, end - inputs)]
    }
}

// ---------------------------------------------------------------------------
// admin enclave

#[derive(Debug)]
pub struct AdminEnclave {
    pub state: EnclaveState,
    ctx: Arc<JobContext>,
    pool: MaskPool,
    /// SSP arrival order of mask requests this iteration.
    arrivals: Vec<usize>,
    holders: BTreeMap<usize, String>,
    cut: bool,
}

impl AdminEnclave {
    fn layout(ctx: &JobContext) -> PoolLayout {
        PoolLayout {
            sets: ctx.cfg.pool_sets(),
            n: ctx.n(),
            domain: ctx.cfg.domain,
            frac_bits: ctx.cfg.frac_bits,
        }
    }

    /// First launch: generates the whole mask pool.
    pub fn launch(
        id: &str,
        measurement: CodeMeasurement,
        ctx: Arc<JobContext>,
        store: &dyn BlobStore,
        cas: &mut Cas,
    ) -> Result<Self, EnclaveError> {
        let mut state = EnclaveState::new(id, Role::Admin, measurement, ctx.cfg.seed);
        let mut rng = derive_rng(ctx.cfg.seed, "mask-pool");
        let pool = MaskPool::pregenerate(Self::layout(&ctx), &ctx.shape, &mut rng, store, cas, id)?;
        state.secret(cas, &SecretId::PoolSecret)?;
        Ok(Self {
            state,
            ctx,
            pool,
            arrivals: Vec::new(),
            holders: BTreeMap::new(),
            cut: false,
        })
    }

    /// Replacement launch: rebuilds the pool from the secret kept by the CAS.
    pub fn recover(
        id: &str,
        measurement: CodeMeasurement,
        ctx: Arc<JobContext>,
        cursor: u64,
        cas: &mut Cas,
    ) -> Result<Self, EnclaveError> {
        let mut state = EnclaveState::new(id, Role::Admin, measurement, ctx.cfg.seed);
        let secret = state.secret(cas, &SecretId::PoolSecret)?;
        let pool = MaskPool::recover(Self::layout(&ctx), &ctx.shape, secret, cursor);
        Ok(Self {
            state,
            ctx,
            pool,
            arrivals: Vec::new(),
            holders: BTreeMap::new(),
            cut: false,
        })
    }

    /// Moves a training slot to a replacement enclave.
    pub fn rebind(&mut self, index: usize, enclave_id: &str) {
        self.pool.rebind(index, enclave_id);
    }

    fn grant(&mut self, env: &mut Env, to: usize, grant: Option<(u64, u32)>) -> Result<(), EnclaveError> {
        self.state.send(
            env,
            env.now,
            Role::Training(to),
            TaintLabel::Control,
            Body::MaskGrant { grant },
        )
    }

    fn cut(&mut self, env: &mut Env) -> Result<(), EnclaveError> {
        self.cut = true;
        let k = self.arrivals.len();
        if k < self.ctx.cfg.min_k() {
            env.actions.push(Action::Abort {
                reason: format!(
                    "iteration {} got {k} updates, needs {}",
                    self.state.step,
                    self.ctx.cfg.min_k()
                ),
            });
            return Ok(());
        }
        let participants = self.arrivals.clone();
        self.state.send(
            env,
            env.now,
            Role::Aggregator,
            TaintLabel::Control,
            Body::Control {
                participants: participants.iter().map(|&p| p as u32).collect(),
            },
        )?;
        let step = self.state.step;
        for &p in &participants[..k - 1] {
            let holder = self.holders[&p].clone();
            let g = self.pool.serve_mask_request(step, p, &holder)?;
            self.grant(env, p, Some((g.set, g.index as u32)))?;
        }
        let last = participants[k - 1];
        let g = self.pool.issue_residual(
            step,
            self.state.attempt,
            &participants,
            env.store,
            env.cas,
            &self.state.id,
        )?;
        self.grant(env, last, Some((g.set, g.index as u32)))
    }
}

impl Enclave for AdminEnclave {
    fn state(&self) -> &EnclaveState {
        &self.state
    }

    fn begin(&mut self, env: &mut Env, step: u64, attempt: u64) -> Result<(), EnclaveError> {
        self.state.begin(env, step, attempt);
        self.arrivals.clear();
        self.cut = false;
        self.holders.clear();
        if self.ctx.cfg.mode == JobMode::MaskSsp {
            env.wake(env.now + self.ctx.cfg.ssp_timeout(), WakeKind::SspCutoff);
        }
        Ok(())
    }

    fn on_message(&mut self, env: &mut Env, msg: Inbound) -> Result<(), EnclaveError> {
        if !admissible(Role::Admin, msg.label.code()) {
            return Err(EnclaveError::Privacy(format!(
                "admin received a message labelled {} from {}",
                msg.label, msg.from_id
            )));
        }
        let m = self.state.open(env, &msg)?;
        if m.msg_type() == MsgType::ModelReady {
            let newer = !self.state.active || (m.step, m.attempt) > (self.state.step, self.state.attempt);
            return if newer {
                self.begin(env, m.step, m.attempt)
            } else {
                Ok(())
            };
        }
        if !self.state.current(&m) {
            return Ok(());
        }
        let Body::MaskReq { index } = m.body else {
            return Err(EnclaveError::Protocol(format!(
                "admin cannot handle {}",
                m.msg_type()
            )));
        };
        let index = index as usize;
        if msg.from != Role::Training(index) {
            return Err(EnclaveError::Protocol(format!(
                "{} asked for the mask of slot {index}",
                msg.from_id
            )));
        }
        if self.ctx.cfg.mode == JobMode::Mask {
            let g = self
                .pool
                .serve_mask_request(self.state.step, index, &msg.from_id)?;
            return self.grant(env, index, Some((g.set, g.index as u32)));
        }
        if self.cut {
            return self.grant(env, index, None);
        }
        if !self.arrivals.contains(&index) {
            self.arrivals.push(index);
            self.holders.insert(index, msg.from_id);
        }
        if self.arrivals.len() == self.ctx.n() {
            self.cut(env)?;
        }
        Ok(())
    }

    fn on_wake(&mut self, env: &mut Env, kind: WakeKind) -> Result<(), EnclaveError> {
        if kind == WakeKind::SspCutoff && !self.cut {
            self.cut(env)?;
        }
        Ok(())
    }

    fn phase_at(&self, _t: SimTime) -> Phase {
        Phase::Masking
    }

    fn breakdown(&self, begin: SimTime, end: SimTime) -> Vec<(Phase, SimTime)> {
        vec![(Phase::Masking, end - begin)]
    }
}
