//! Analytic per-iteration time estimates for the two aggregation modes.
//!
//! All times are integer simulated time units. The simulator charges exactly
//! these cost functions, so its measurements can be compared with the
//! estimates without tolerance.

use serde::{Deserialize, Serialize};

use crate::aggregation::round_count;

pub type SimTime = u64;

/// `base + ceil(bytes / bytes_per_unit)`; a zero rate means size-independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LinearCost {
    pub base: SimTime,
    #[serde(default)]
    pub bytes_per_unit: u64,
}

impl LinearCost {
    pub const ZERO: Self = Self::constant(0);

    pub const fn constant(base: SimTime) -> Self {
        Self {
            base,
            bytes_per_unit: 0,
        }
    }

    pub fn at(&self, bytes: u64) -> SimTime {
        if self.bytes_per_unit == 0 {
            self.base
        } else {
            self.base + bytes.div_ceil(self.bytes_per_unit)
        }
    }
}

/// Cost of folding `k` updates: `base + per_update * k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AggCost {
    pub base: SimTime,
    pub per_update: SimTime,
}

impl AggCost {
    pub fn at(&self, k: usize) -> SimTime {
        self.base + self.per_update * k as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub net: LinearCost,
    pub enc: LinearCost,
    pub dec: LinearCost,
    pub t_mask: SimTime,
    pub t_train: SimTime,
    pub t_apply: SimTime,
    pub agg: AggCost,
    /// Size of one encrypted mask, `m`.
    pub mask_bytes: u64,
    /// Size of one encrypted update message, `g`.
    pub update_bytes: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            net: LinearCost {
                base: 5,
                bytes_per_unit: 1000,
            },
            enc: LinearCost {
                base: 1,
                bytes_per_unit: 4000,
            },
            dec: LinearCost {
                base: 1,
                bytes_per_unit: 4000,
            },
            t_mask: 1,
            t_train: 100,
            t_apply: 5,
            agg: AggCost {
                base: 1,
                per_update: 16,
            },
            mask_bytes: 4096,
            update_bytes: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Mask,
    Tree,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Mask => "mask",
            Mode::Tree => "tree",
        })
    }
}

/// Iteration time with zero-sum masking and `n` training enclaves.
pub fn estimate_mask(p: &CostParams, n: usize) -> SimTime {
    let (m, g) = (p.mask_bytes, p.update_bytes);
    p.t_train
        + p.net.at(m)
        + p.dec.at(m)
        + p.t_mask
        + p.enc.at(g)
        + p.net.at(g)
        + p.dec.at(g)
        + p.agg.at(n)
        + p.t_apply
}

/// Iteration time with a `c`-ary aggregation tree over `n` enclaves.
pub fn estimate_tree(p: &CostParams, n: usize, c: usize) -> SimTime {
    let g = p.update_bytes;
    let per_round = p.enc.at(g) + p.dec.at(g) + p.agg.at(c) + p.net.at(g);
    per_round * round_count(n, c) as u64 + p.t_train + p.t_apply
}

/// The cheaper mode; ties go to masking.
pub fn recommend_mode(p: &CostParams, n: usize, c: usize) -> Mode {
    if estimate_tree(p, n, c) < estimate_mask(p, n) {
        Mode::Tree
    } else {
        Mode::Mask
    }
}
