//! Toy models and the model owner's update pipeline.
//!
//! Gradients are computed in f64 and handed to the protocol as real vectors;
//! each training enclave converts them into the job's arithmetic domain. The
//! model itself is stored as a `Float32` [`GradVector`], so a checkpoint is a
//! pure function of the aggregated update sequence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensors::{decode_fixed, Domain, FixedPointConfig, GradVector, Reader, TensorError};

/// Marker embedded in every plaintext data shard and checkpoint so tests can
/// scan ciphertext and message bytes for leaks.
pub const PLAINTEXT_CANARY: &[u8] = b"CITADEL-PLAINTEXT-CANARY-7f3a91";

const BATCH_MAGIC: &[u8; 4] = b"CBAT";
const CHECKPOINT_MAGIC: &[u8; 4] = b"CMDL";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    LogisticRegression,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            base_lr: lr,
            decay_factor: 1.0,
            decay_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input width, then hidden widths (MLP only), then 1.
    pub layer_dims: Vec<usize>,
    pub init_seed: u64,
    pub hyperparams: Hyperparams,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = &self.layer_dims;
        let ok = match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                dims.len() == 2 && dims[1] == 1
            }
            ModelKind::Mlp => dims.len() == 3 && dims[2] == 1,
        };
        if !ok || dims.contains(&0) {
            return Err(ModelError::Config(format!(
                "layer_dims {dims:?} do not fit {:?}",
                self.kind
            )));
        }
        let hp = &self.hyperparams;
        if hp.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if hp.clip_norm.is_nan() || hp.clip_norm <= 0.0 {
            return Err(ModelError::Config("clip_norm must be positive".into()));
        }
        if hp.lr_schedule.decay_every == 0 {
            return Err(ModelError::Config("decay_every must be positive".into()));
        }
        Ok(())
    }

    pub fn features(&self) -> usize {
        self.layer_dims[0]
    }

    /// Per-layer parameter counts: weight matrix then bias, for each layer.
    pub fn shape(&self) -> Vec<usize> {
        self.layer_dims
            .windows(2)
            .flat_map(|w| [w[0] * w[1], w[1]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.shape().iter().sum()
    }

    pub fn initial_state(&self) -> ModelState {
        let weights: Vec<f32> = match self.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                vec![0.0; self.param_count()]
            }
            ModelKind::Mlp => {
                let mut rng = ChaCha20Rng::seed_from_u64(self.init_seed);
                let mut w = Vec::with_capacity(self.param_count());
                for pair in self.layer_dims.windows(2) {
                    let bound = 1.0 / (pair[0] as f64).sqrt();
                    w.extend((0..pair[0] * pair[1]).map(|_| rng.gen_range(-bound..bound) as f32));
                    w.extend(std::iter::repeat_n(0.0f32, pair[1]));
                }
                w
            }
        };
        ModelState {
            weights: GradVector::from_f32(weights, self.shape()).expect("shape from spec"),
            epoch: 0,
            batch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub weights: GradVector,
    pub epoch: u64,
    pub batch: u64,
}

impl ModelState {
    pub fn step(&self, batches_per_epoch: u64) -> u64 {
        self.epoch * batches_per_epoch + self.batch
    }

    /// Checkpoint plaintext: magic | canary | epoch | batch | weights payload.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(PLAINTEXT_CANARY);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.batch.to_le_bytes());
        out.extend_from_slice(&self.weights.serialize());
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != CHECKPOINT_MAGIC {
            return Err(TensorError::Format("bad checkpoint magic".into()).into());
        }
        rd.take(PLAINTEXT_CANARY.len())?;
        let epoch = rd.u64()?;
        let batch = rd.u64()?;
        let weights = GradVector::deserialize(rd.rest())?;
        Ok(Self {
            weights,
            epoch,
            batch,
        })
    }
}

/// One mini-batch held by a data owner.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major, `rows() * n_features` values.
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<f64>,
    pub owner_id: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn check(&self) -> Result<(), ModelError> {
        if self.rows() == 0 || self.features.len() != self.rows() * self.n_features {
            return Err(ModelError::Dimension(format!(
                "{} feature values for {} rows of width {}",
                self.features.len(),
                self.rows(),
                self.n_features
            )));
        }
        Ok(())
    }

    pub fn concat(batches: &[Batch]) -> Batch {
        let mut out = Batch {
            features: Vec::new(),
            n_features: batches[0].n_features,
            labels: Vec::new(),
            owner_id: batches[0].owner_id,
        };
        for b in batches {
            out.features.extend_from_slice(&b.features);
            out.labels.extend_from_slice(&b.labels);
        }
        out
    }

    /// Shard plaintext: magic | canary | owner u32 | rows u32 | cols u32 |
    /// features f64 LE | labels f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = BATCH_MAGIC.to_vec();
        out.extend_from_slice(PLAINTEXT_CANARY);
        out.extend_from_slice(&(self.owner_id as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_features as u32).to_le_bytes());
        for x in self.features.iter().chain(&self.labels) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut rd = Reader::new(bytes);
        if rd.take(4)? != BATCH_MAGIC {
            return Err(TensorError::Format("bad batch magic".into()).into());
        }
        rd.take(PLAINTEXT_CANARY.len())?;
        let owner_id = rd.u32()? as usize;
        let rows = rd.u32()? as usize;
        let n_features = rd.u32()? as usize;
        let features = (0..rows * n_features)
            .map(|_| rd.f64())
            .collect::<Result<Vec<_>, _>>()?;
        let labels = (0..rows).map(|_| rd.f64()).collect::<Result<Vec<_>, _>>()?;
        if rd.remaining() != 0 {
            return Err(TensorError::Format("trailing bytes after batch".into()).into());
        }
        Ok(Self {
            features,
            n_features,
            labels,
            owner_id,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn check_inputs(spec: &ModelSpec, weights: &[f64], batch: &Batch) -> Result<(), ModelError> {
    batch.check()?;
    if batch.n_features != spec.features() {
        return Err(ModelError::Dimension(format!(
            "batch has {} features, model expects {}",
            batch.n_features,
            spec.features()
        )));
    }
    if weights.len() != spec.param_count() {
        return Err(ModelError::Dimension(format!(
            "{} weights for a model with {} parameters",
            weights.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

struct MlpView<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: f64,
    hidden: usize,
}

impl<'a> MlpView<'a> {
    fn new(spec: &ModelSpec, w: &'a [f64]) -> Self {
        let (d, h) = (spec.layer_dims[0], spec.layer_dims[1]);
        Self {
            w1: &w[..d * h],
            b1: &w[d * h..d * h + h],
            w2: &w[d * h + h..d * h + 2 * h],
            b2: w[d * h + 2 * h],
            hidden: h,
        }
    }

    /// Hidden activations and the output logit.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, f64) {
        let d = x.len();
        let a: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let z: f64 = (0..d).map(|k| x[k] * self.w1[k * self.hidden + j]).sum();
                (z + self.b1[j]).tanh()
            })
            .collect();
        let out = a.iter().zip(self.w2).map(|(a, w)| a * w).sum::<f64>() + self.b2;
        (a, out)
    }
}

fn linear_out(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() + w[x.len()]
}

/// Per-sample loss: squared error for regression, cross-entropy on the
/// logit for classification.
fn sample_loss(kind: ModelKind, out: f64, y: f64) -> f64 {
    match kind {
        ModelKind::LinearRegression => (out - y).powi(2),
        ModelKind::LogisticRegression | ModelKind::Mlp => softplus(out) - y * out,
    }
}

fn output_grad(kind: ModelKind, out: f64, y: f64) -> f64 {
    match kind {
        ModelKind::LinearRegression => 2.0 * (out - y),
        ModelKind::LogisticRegression | ModelKind::Mlp => sigmoid(out) - y,
    }
}

fn forward_out(spec: &ModelSpec, w: &[f64], x: &[f64]) -> f64 {
    match spec.kind {
        ModelKind::Mlp => MlpView::new(spec, w).forward(x).1,
        _ => linear_out(w, x),
    }
}

/// Mean loss over the batch.
pub fn loss(spec: &ModelSpec, weights: &[f64], batch: &Batch) -> Result<f64, ModelError> {
    check_inputs(spec, weights, batch)?;
    let total: f64 = (0..batch.rows())
        .map(|i| sample_loss(spec.kind, forward_out(spec, weights, batch.row(i)), batch.labels[i]))
        .sum();
    Ok(total / batch.rows() as f64)
}

/// Mean loss gradient with respect to real-valued weights.
pub fn gradient(spec: &ModelSpec, weights: &[f64], batch: &Batch) -> Result<Vec<f64>, ModelError> {
    check_inputs(spec, weights, batch)?;
    let mut grad = vec![0.0; weights.len()];
    let d = spec.features();
    for i in 0..batch.rows() {
        let x = batch.row(i);
        let y = batch.labels[i];
        match spec.kind {
            ModelKind::LinearRegression | ModelKind::LogisticRegression => {
                let delta = output_grad(spec.kind, linear_out(weights, x), y);
                for k in 0..d {
                    grad[k] += delta * x[k];
                }
                grad[d] += delta;
            }
            ModelKind::Mlp => {
                let view = MlpView::new(spec, weights);
                let h = view.hidden;
                let (a, out) = view.forward(x);
                let delta = output_grad(spec.kind, out, y);
                let (w1_end, b1_end) = (d * h, d * h + h);
                for j in 0..h {
                    grad[b1_end + j] += delta * a[j];
                    let dz = delta * view.w2[j] * (1.0 - a[j] * a[j]);
                    for k in 0..d {
                        grad[k * h + j] += dz * x[k];
                    }
                    grad[w1_end + j] += dz;
                }
                grad[b1_end + h] += delta;
            }
        }
    }
    let n = batch.rows() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Mean gradient of the loss at the state's weights.
pub fn compute_gradients(
    spec: &ModelSpec,
    state: &ModelState,
    batch: &Batch,
) -> Result<Vec<f64>, ModelError> {
    gradient(spec, &state.weights.to_reals(), batch)
}

pub fn predict(spec: &ModelSpec, weights: &[f64], x: &[f64]) -> f64 {
    forward_out(spec, weights, x)
}

/// Fraction of rows classified correctly (logit > 0 means class 1).
pub fn accuracy(spec: &ModelSpec, weights: &[f64], batch: &Batch) -> f64 {
    let correct = (0..batch.rows())
        .filter(|&i| (predict(spec, weights, batch.row(i)) > 0.0) == (batch.labels[i] > 0.5))
        .count();
    correct as f64 / batch.rows() as f64
}

pub fn clip_gradients(g: &[f64], clip_norm: f64) -> Result<Vec<f64>, ModelError> {
    if clip_norm.is_nan() || clip_norm <= 0.0 {
        return Err(ModelError::Config(format!(
            "clip_norm must be positive, got {clip_norm}"
        )));
    }
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= clip_norm {
        return Ok(g.to_vec());
    }
    let scale = clip_norm / norm;
    Ok(g.iter().map(|x| x * scale).collect())
}

/// Learning rate at global iteration `step`.
pub fn lr_at(schedule: &LrSchedule, step: u64) -> f64 {
    schedule.base_lr * schedule.decay_factor.powi((step / schedule.decay_every) as i32)
}

/// Applies the summed update of `participants` enclaves: the sum is turned
/// into a mean, clipped, and subtracted at the scheduled learning rate.
pub fn apply_update(
    spec: &ModelSpec,
    state: &ModelState,
    agg: &GradVector,
    participants: usize,
    fixed: &FixedPointConfig,
    batches_per_epoch: u64,
) -> Result<ModelState, ModelError> {
    if agg.shape() != state.weights.shape() {
        return Err(ModelError::Dimension(format!(
            "update shape {:?} vs model shape {:?}",
            agg.shape(),
            state.weights.shape()
        )));
    }
    if participants == 0 {
        return Err(ModelError::Config("no participants".into()));
    }
    let sum = match agg.domain() {
        Domain::Fixed64 => decode_fixed(agg, fixed)?,
        Domain::Float32 => agg.to_reals(),
    };
    let k = participants as f64;
    let mean: Vec<f64> = sum.iter().map(|x| x / k).collect();
    let clipped = clip_gradients(&mean, spec.hyperparams.clip_norm)?;
    let lr = lr_at(&spec.hyperparams.lr_schedule, state.step(batches_per_epoch));
    let weights: Vec<f32> = state
        .weights
        .to_reals()
        .iter()
        .zip(&clipped)
        .map(|(w, g)| (w - lr * g) as f32)
        .collect();
    let (epoch, batch) = if state.batch + 1 >= batches_per_epoch {
        (state.epoch + 1, 0)
    } else {
        (state.epoch, state.batch + 1)
    };
    Ok(ModelState {
        weights: GradVector::from_f32(weights, state.weights.shape().to_vec())?,
        epoch,
        batch,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub samples: usize,
    pub eval_samples: usize,
    pub features: usize,
    pub margin: f64,
    pub owners: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            eval_samples: 500,
            features: 20,
            margin: 0.5,
            owners: 4,
            batch_size: 50,
            lr: 0.5,
            clip_norm: 5.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    /// `shards[owner][batch]`.
    pub shards: Vec<Vec<Batch>>,
    pub spec: ModelSpec,
    pub eval: Batch,
}

impl ToyTask {
    pub fn batches_per_epoch(&self) -> u64 {
        self.shards.iter().map(|s| s.len()).min().unwrap_or(0) as u64
    }
}

fn separable_samples(
    rng: &mut ChaCha20Rng,
    direction: &[f64],
    count: usize,
    margin: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(count * direction.len());
    let mut ys = Vec::with_capacity(count);
    while ys.len() < count {
        let x: Vec<f64> = direction.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let score: f64 = x.iter().zip(direction).map(|(a, b)| a * b).sum();
        if score.abs() < margin {
            continue;
        }
        xs.extend_from_slice(&x);
        ys.push(if score > 0.0 { 1.0 } else { 0.0 });
    }
    (xs, ys)
}

/// A linearly separable two-class problem split evenly across owners.
/// Deterministic per seed.
pub fn make_toy_task(seed: u64, cfg: &TaskConfig) -> Result<ToyTask, ModelError> {
    if cfg.owners == 0 || cfg.samples < cfg.owners * cfg.batch_size || cfg.batch_size == 0 {
        return Err(ModelError::Config(format!(
            "{} samples cannot give {} owners a batch of {}",
            cfg.samples, cfg.owners, cfg.batch_size
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..cfg.features).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let direction: Vec<f64> = raw.iter().map(|x| x / norm).collect();

    let (xs, ys) = separable_samples(&mut rng, &direction, cfg.samples, cfg.margin);
    let (ex, ey) = separable_samples(&mut rng, &direction, cfg.eval_samples, cfg.margin);

    let per_owner = cfg.samples / cfg.owners;
    let batches = per_owner / cfg.batch_size;
    let d = cfg.features;
    let shards = (0..cfg.owners)
        .map(|owner| {
            (0..batches)
                .map(|b| {
                    let start = owner * per_owner + b * cfg.batch_size;
                    let end = start + cfg.batch_size;
                    Batch {
                        features: xs[start * d..end * d].to_vec(),
                        n_features: d,
                        labels: ys[start..end].to_vec(),
                        owner_id: owner,
                    }
                })
                .collect()
        })
        .collect();
    let spec = ModelSpec {
        kind: ModelKind::LogisticRegression,
        layer_dims: vec![d, 1],
        init_seed: seed,
        hyperparams: Hyperparams {
            batch_size: cfg.batch_size,
            lr_schedule: LrSchedule::constant(cfg.lr),
            clip_norm: cfg.clip_norm,
        },
    };
    Ok(ToyTask {
        shards,
        spec,
        eval: Batch {
            features: ex,
            n_features: d,
            labels: ey,
            owner_id: usize::MAX,
        },
    })
}

/// Plain synchronous SGD over the task's shards, without any protocol:
/// every owner's batch gradient is converted to `domain`, summed in owner
/// order, and applied. This is the reference the protocol runs must match.
pub fn train_centralized(
    task: &ToyTask,
    domain: Domain,
    fixed: &FixedPointConfig,
    iterations: u64,
) -> Result<ModelState, ModelError> {
    let spec = &task.spec;
    let per_epoch = task.batches_per_epoch();
    let mut state = spec.initial_state();
    for _ in 0..iterations {
        let t = state.batch as usize;
        let mut sum: Option<GradVector> = None;
        for shard in &task.shards {
            let g = compute_gradients(spec, &state, &shard[t])?;
            let v = GradVector::from_reals(&g, spec.shape(), domain, fixed)?;
            sum = Some(match sum {
                None => v,
                Some(s) => s.add(&v)?,
            });
        }
        let sum = sum.expect("at least one owner");
        state = apply_update(spec, &state, &sum, task.shards.len(), fixed, per_epoch)?;
    }
    Ok(state)
}
