//! Flat and hierarchical aggregation plans.
//!
//! In the hierarchical scheme participants reduce their updates through a
//! C-ary tree: at level `l` the leaders are the participants whose index is a
//! multiple of `c^l`, and every other active participant sends its partial
//! sum to `floor(i / c^l) * c^l`. Participant 0 ends up with the full sum and
//! hands it to the aggregator in one final round.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensors::{fold, GradVector, TensorError};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("invalid tree: {0}")]
    Config(String),
    #[error("round {round}: leader {leader} is missing partials from {missing:?}")]
    Incomplete {
        round: usize,
        leader: usize,
        missing: Vec<usize>,
    },
    #[error("expected {expected} local updates, got {got}")]
    UpdateCount { expected: usize, got: usize },
    #[error("nothing to aggregate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Target {
    Leader(usize),
    Aggregator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub from: usize,
    pub to: Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreePlan {
    pub n: usize,
    pub c: usize,
    pub rounds: Vec<Vec<Edge>>,
    pub final_leader: usize,
}

/// Smallest `l` with `c^l >= n`.
pub fn ceil_log(n: usize, c: usize) -> usize {
    let mut levels = 0;
    let mut reach = 1usize;
    while reach < n {
        reach = reach.saturating_mul(c);
        levels += 1;
    }
    levels
}

/// Number of rounds including the final hand-off: `ceil(log_c n) + 1`.
pub fn round_count(n: usize, c: usize) -> usize {
    ceil_log(n, c) + 1
}

pub fn build_tree_plan(n: usize, c: usize) -> Result<TreePlan, AggregationError> {
    if c < 2 {
        return Err(AggregationError::Config(format!("children per leader must be >= 2, got {c}")));
    }
    if n == 0 {
        return Err(AggregationError::Config("no participants".into()));
    }
    let levels = ceil_log(n, c);
    let mut rounds = Vec::with_capacity(levels + 1);
    let mut stride = 1usize;
    for _ in 0..levels {
        let group = stride * c;
        let edges = (0..n)
            .step_by(stride)
            .filter(|i| i % group != 0)
            .map(|i| Edge {
                from: i,
                to: Target::Leader(i / group * group),
            })
            .collect();
        rounds.push(edges);
        stride = group;
    }
    rounds.push(vec![Edge {
        from: 0,
        to: Target::Aggregator,
    }]);
    Ok(TreePlan {
        n,
        c,
        rounds,
        final_leader: 0,
    })
}

impl TreePlan {
    /// Participants still holding a partial when round `round` starts.
    pub fn active_at(&self, round: usize) -> Vec<usize> {
        let stride = self.c.pow(round as u32);
        (0..self.n).step_by(stride).collect()
    }

    /// Senders addressed to each leader in `round`, in ascending order.
    pub fn children(&self, round: usize) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for e in &self.rounds[round] {
            if let Target::Leader(l) = e.to {
                out.entry(l).or_default().push(e.from);
            }
        }
        out
    }

    /// The round in which `participant` sends, and to whom.
    pub fn send_of(&self, participant: usize) -> Option<(usize, Target)> {
        self.rounds.iter().enumerate().find_map(|(r, edges)| {
            edges
                .iter()
                .find(|e| e.from == participant)
                .map(|e| (r, e.to))
        })
    }
}

/// Sums updates in ascending participant order.
pub fn flat_aggregate(updates: &[GradVector]) -> Result<GradVector, AggregationError> {
    fold(updates)?.ok_or(AggregationError::Empty)
}

/// Transport used by [`run_tree_aggregation`]. Returning `None` models a
/// partial that never arrived before the round's timeout.
pub trait TreeChannel {
    fn transfer(&mut self, round: usize, edge: Edge, value: GradVector) -> Option<GradVector>;
}

/// Delivers everything and counts what it carried.
#[derive(Debug, Default)]
pub struct CountingChannel {
    pub messages: Vec<(usize, Edge)>,
}

impl TreeChannel for CountingChannel {
    fn transfer(&mut self, round: usize, edge: Edge, value: GradVector) -> Option<GradVector> {
        self.messages.push((round, edge));
        Some(value)
    }
}

impl CountingChannel {
    pub fn aggregator_messages(&self) -> usize {
        self.messages
            .iter()
            .filter(|(_, e)| e.to == Target::Aggregator)
            .count()
    }

    /// Largest number of messages any leader received in a single round.
    pub fn max_fan_in(&self) -> usize {
        let mut per: BTreeMap<(usize, Target), usize> = BTreeMap::new();
        for (r, e) in &self.messages {
            *per.entry((*r, e.to)).or_default() += 1;
        }
        per.into_iter()
            .filter(|((_, t), _)| *t != Target::Aggregator)
            .map(|(_, n)| n)
            .max()
            .unwrap_or(0)
    }
}

/// Runs the plan round by round. Each leader folds its own partial first and
/// then its children's partials in ascending index order.
pub fn run_tree_aggregation(
    plan: &TreePlan,
    local_updates: &[GradVector],
    channel: &mut dyn TreeChannel,
) -> Result<GradVector, AggregationError> {
    if local_updates.len() != plan.n {
        return Err(AggregationError::UpdateCount {
            expected: plan.n,
            got: local_updates.len(),
        });
    }
    let mut partials: BTreeMap<usize, GradVector> =
        local_updates.iter().cloned().enumerate().collect();
    let last = plan.rounds.len() - 1;
    for (round, edges) in plan.rounds.iter().enumerate().take(last) {
        let mut inbox: BTreeMap<usize, Vec<(usize, GradVector)>> = BTreeMap::new();
        for &edge in edges {
            let value = partials.remove(&edge.from).expect("active sender holds a partial");
            if let (Target::Leader(l), Some(v)) = (edge.to, channel.transfer(round, edge, value)) {
                inbox.entry(l).or_default().push((edge.from, v));
            }
        }
        for (leader, expected) in plan.children(round) {
            let arrived = inbox.remove(&leader).unwrap_or_default();
            let missing: Vec<usize> = expected
                .iter()
                .copied()
                .filter(|c| !arrived.iter().any(|(from, _)| from == c))
                .collect();
            if !missing.is_empty() {
                return Err(AggregationError::Incomplete {
                    round,
                    leader,
                    missing,
                });
            }
            let mut acc = partials.remove(&leader).expect("leader holds a partial");
            let mut arrived = arrived;
            arrived.sort_by_key(|(from, _)| *from);
            for (_, v) in &arrived {
                acc = acc.add(v)?;
            }
            partials.insert(leader, acc);
        }
    }
    let total = partials
        .remove(&plan.final_leader)
        .expect("final leader holds the sum");
    let edge = plan.rounds[last][0];
    channel
        .transfer(last, edge, total)
        .ok_or(AggregationError::Incomplete {
            round: last,
            leader: plan.final_leader,
            missing: vec![plan.final_leader],
        })
}
