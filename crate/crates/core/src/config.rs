//! Job configuration: a TOML file fully describing one simulated run.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cas::Role;
use crate::costmodel::{AggCost, LinearCost, SimTime};
use crate::models::{Hyperparams, LrSchedule, ModelKind, ModelSpec, TaskConfig};
use crate::tensors::{Domain, FixedPointConfig};

#[derive(Debug, Error, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_owned(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobMode {
    Mask,
    Tree,
    MaskSsp,
}

impl JobMode {
    pub fn uses_masks(self) -> bool {
        matches!(self, JobMode::Mask | JobMode::MaskSsp)
    }
}

impl std::fmt::Display for JobMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            JobMode::Mask => "mask",
            JobMode::Tree => "tree",
            JobMode::MaskSsp => "mask_ssp",
        })
    }
}

/// `delivery = send + per_message_latency + ceil(size / bandwidth)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub per_message_latency: SimTime,
    /// Bytes per time unit; 0 means unlimited.
    #[serde(default)]
    pub bandwidth: u64,
}

impl LatencyModel {
    pub fn transfer_time(&self, bytes: u64) -> SimTime {
        self.as_cost().at(bytes)
    }

    pub fn as_cost(&self) -> LinearCost {
        LinearCost {
            base: self.per_message_latency,
            bytes_per_unit: self.bandwidth,
        }
    }
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            per_message_latency: 5,
            bandwidth: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpCosts {
    pub t_train: SimTime,
    pub t_mask: SimTime,
    pub t_apply: SimTime,
    pub enc: LinearCost,
    pub dec: LinearCost,
    pub agg: AggCost,
}

impl Default for OpCosts {
    fn default() -> Self {
        Self {
            t_train: 100,
            t_mask: 1,
            t_apply: 5,
            enc: LinearCost {
                base: 1,
                bytes_per_unit: 4000,
            },
            dec: LinearCost {
                base: 1,
                bytes_per_unit: 4000,
            },
            agg: AggCost {
                base: 1,
                per_update: 16,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub features: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "one")]
    pub lr_decay: f64,
    /// Iterations between decays; no decay when absent.
    #[serde(default)]
    pub lr_decay_every: Option<u64>,
    pub clip_norm: f64,
    #[serde(default = "default_eval")]
    pub eval_samples: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
}

fn one() -> f64 {
    1.0
}
fn default_eval() -> usize {
    500
}
fn default_margin() -> f64 {
    0.5
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            hidden: Vec::new(),
            features: 20,
            batch_size: 50,
            lr: 0.5,
            lr_decay: 1.0,
            lr_decay_every: None,
            clip_norm: 5.0,
            eval_samples: 500,
            margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SspConfig {
    /// Fewest arrivals an iteration may proceed with.
    pub min_k: usize,
    /// Cut-off after the iteration starts; defaults to `5 * t_train`.
    #[serde(default)]
    pub timeout: Option<SimTime>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Crash,
    /// Extra training time for the target in that iteration.
    Delay(SimTime),
    /// Misbehaving training code that sends its gradient unmasked.
    LeakUnmasked,
    /// The target runs code whose measurement nobody approved.
    Tamper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub target: Role,
    /// Global iteration index.
    #[serde(default)]
    pub iteration: u64,
    pub action: FaultAction,
    /// Crash time after the iteration starts; defaults to `t_train / 2`.
    #[serde(default)]
    pub offset: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub n_training: usize,
    pub mode: JobMode,
    #[serde(default = "default_c")]
    pub children_c: usize,
    pub domain: Domain,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u8,
    #[serde(default = "default_clamp")]
    pub clamp_abs: f64,
    pub epochs: u64,
    pub batches_per_epoch: u64,
    pub seed: u64,
    /// Defaults to one set per iteration.
    #[serde(default)]
    pub mask_pool_size: Option<u64>,
    #[serde(default = "default_restarts")]
    pub max_restarts: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub costs: OpCosts,
    #[serde(default)]
    pub ssp: Option<SspConfig>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn default_c() -> usize {
    2
}
fn default_frac_bits() -> u8 {
    24
}
fn default_clamp() -> f64 {
    1024.0
}
fn default_restarts() -> u64 {
    16
}

impl JobConfig {
    pub fn template(name: &str) -> Option<Self> {
        let base = Self {
            n_training: 4,
            mode: JobMode::Mask,
            children_c: 2,
            domain: Domain::Fixed64,
            frac_bits: 24,
            clamp_abs: 1024.0,
            epochs: 20,
            batches_per_epoch: 10,
            seed: 7,
            mask_pool_size: None,
            max_restarts: 16,
            model: ModelConfig::default(),
            latency: LatencyModel::default(),
            costs: OpCosts::default(),
            ssp: None,
            faults: Vec::new(),
        };
        match name {
            "mask" => Some(base),
            "tree" => Some(Self {
                mode: JobMode::Tree,
                ..base
            }),
            "ssp" => Some(Self {
                mode: JobMode::MaskSsp,
                ssp: Some(SspConfig {
                    min_k: 3,
                    timeout: None,
                }),
                faults: vec![FaultSpec {
                    target: Role::Training(3),
                    iteration: 2,
                    action: FaultAction::Delay(1000),
                    offset: None,
                }],
                ..base
            }),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn iterations(&self) -> u64 {
        self.epochs * self.batches_per_epoch
    }

    pub fn pool_sets(&self) -> u64 {
        self.mask_pool_size.unwrap_or_else(|| self.iterations())
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            frac_bits: self.frac_bits,
            clamp_abs: self.clamp_abs,
        }
    }

    pub fn ssp_timeout(&self) -> SimTime {
        self.ssp
            .and_then(|s| s.timeout)
            .unwrap_or(5 * self.costs.t_train)
    }

    pub fn min_k(&self) -> usize {
        self.ssp.map(|s| s.min_k).unwrap_or(self.n_training)
    }

    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            samples: self.n_training * self.batches_per_epoch as usize * self.model.batch_size,
            eval_samples: self.model.eval_samples,
            features: self.model.features,
            margin: self.model.margin,
            owners: self.n_training,
            batch_size: self.model.batch_size,
            lr: self.model.lr,
            clip_norm: self.model.clip_norm,
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        let mut dims = vec![self.model.features];
        dims.extend(&self.model.hidden);
        dims.push(1);
        ModelSpec {
            kind: self.model.kind,
            layer_dims: dims,
            init_seed: self.seed,
            hyperparams: Hyperparams {
                batch_size: self.model.batch_size,
                lr_schedule: LrSchedule {
                    base_lr: self.model.lr,
                    decay_factor: self.model.lr_decay,
                    decay_every: self.model.lr_decay_every.unwrap_or(u64::MAX),
                },
                clip_norm: self.model.clip_norm,
            },
        }
    }

    /// Extra training time for `index` in `iteration`.
    pub fn delay_for(&self, index: usize, iteration: u64) -> SimTime {
        self.faults
            .iter()
            .filter(|f| f.target == Role::Training(index) && f.iteration == iteration)
            .map(|f| match f.action {
                FaultAction::Delay(d) => d,
                _ => 0,
            })
            .sum()
    }

    pub fn has_fault(&self, target: Role, iteration: u64, action: FaultAction) -> bool {
        self.faults
            .iter()
            .any(|f| f.target == target && f.iteration == iteration && f.action == action)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let n = self.n_training;
        if n == 0 {
            return Err(invalid("n_training", "must be at least 1"));
        }
        if n > u32::MAX as usize {
            return Err(invalid("n_training", "too large"));
        }
        if self.mode == JobMode::Tree && self.children_c < 2 {
            return Err(invalid(
                "children_c",
                format!("tree mode needs at least 2 children per leader, got {}", self.children_c),
            ));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be at least 1"));
        }
        if self.batches_per_epoch == 0 {
            return Err(invalid("batches_per_epoch", "must be at least 1"));
        }
        if self.domain == Domain::Fixed64 {
            let fixed = self.fixed_point();
            fixed
                .validate()
                .map_err(|e| invalid("frac_bits", e.to_string()))?;
            // every partial sum of n clamped values must stay below 2^62
            fixed
                .validate_headroom(n)
                .map_err(|e| invalid("clamp_abs", e.to_string()))?;
        }
        self.model_spec()
            .validate()
            .map_err(|e| invalid("model", e.to_string()))?;
        if self.model.eval_samples == 0 {
            return Err(invalid("model.eval_samples", "must be at least 1"));
        }
        if !(self.model.margin >= 0.0 && self.model.margin < 1.0) {
            return Err(invalid("model.margin", "must lie in [0, 1)"));
        }
        if self.costs.t_train == 0 {
            return Err(invalid("costs.t_train", "must be at least 1"));
        }
        match (self.mode, self.ssp) {
            (JobMode::MaskSsp, None) => {
                return Err(invalid("ssp", "mask_ssp mode needs an [ssp] table"))
            }
            (JobMode::MaskSsp, Some(s)) if s.min_k == 0 || s.min_k > n => {
                return Err(invalid(
                    "ssp.min_k",
                    format!("must lie in 1..={n}, got {}", s.min_k),
                ))
            }
            (JobMode::MaskSsp, Some(SspConfig { timeout: Some(0), .. })) => {
                return Err(invalid("ssp.timeout", "must be positive"))
            }
            _ => {}
        }
        for (i, f) in self.faults.iter().enumerate() {
            let field = format!("faults[{i}]");
            match f.target {
                Role::Training(j) if j >= n => {
                    return Err(invalid(
                        &format!("{field}.target"),
                        format!("no training enclave {j} in a job of {n}"),
                    ))
                }
                Role::Admin if !self.mode.uses_masks() => {
                    return Err(invalid(&format!("{field}.target"), "tree mode has no admin"))
                }
                Role::Aggregator | Role::Admin
                    if matches!(f.action, FaultAction::Delay(_) | FaultAction::LeakUnmasked) =>
                {
                    return Err(invalid(
                        &format!("{field}.action"),
                        "only training enclaves can be delayed or leak",
                    ))
                }
                _ => {}
            }
            if f.iteration >= self.iterations() {
                return Err(invalid(
                    &format!("{field}.iteration"),
                    format!("job has only {} iterations", self.iterations()),
                ));
            }
        }
        Ok(())
    }
}
