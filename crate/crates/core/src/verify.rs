//! Named self-check suites run by `citadel verify`.
//!
//! Each suite re-derives its expected values without going through the code
//! path under test where that is cheap (wrapping u128 sums for masks, a
//! hand-rolled round count for trees, the plain-SGD trainer for end-to-end
//! runs).

use std::fmt;

use thiserror::Error;

use crate::aggregation::{build_tree_plan, flat_aggregate, run_tree_aggregation, CountingChannel};
use crate::cas::{Role, SecretId};
use crate::config::{FaultAction, FaultSpec, JobConfig, JobMode};
use crate::costmodel::{estimate_mask, recommend_mode, CostParams, Mode};
use crate::crypto::derive_rng;
use crate::enclaves::JobContext;
use crate::masking::generate_mask_set;
use crate::models::{compute_gradients, train_centralized, PLAINTEXT_CANARY};
use crate::simnet::{cost_params, run_job, JobResult, SimError};
use crate::storage::{BlobKey, Namespace};
use crate::tensors::{Domain, FixedPointConfig, GradVector};

pub const SUITES: &[&str] = &[
    "zero-sum",
    "barrier",
    "tree",
    "e2e",
    "privacy",
    "ssp",
    "fault",
    "costmodel",
    "determinism",
];

/// Runs the privacy checks on a job with a planted unmasked send. Not part
/// of `all`: it is expected to fail.
pub const PLANTED: &str = "planted-violation";

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("unknown suite {0:?}; expected one of {list}, all, {PLANTED}", list = SUITES.join(", "))]
    UnknownSuite(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}/{}", self.suite, self.name)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

struct Report {
    suite: &'static str,
    checks: Vec<Check>,
}

impl Report {
    fn new(suite: &'static str) -> Self {
        Self {
            suite,
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            suite: self.suite,
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn job(&mut self, name: &str, cfg: &JobConfig) -> Option<JobResult> {
        match run_job(cfg) {
            Ok(r) => Some(r),
            Err(e) => {
                self.check(name, false, e.to_string());
                None
            }
        }
    }
}

pub fn run_suite(name: &str) -> Result<Vec<Check>, VerifyError> {
    let names: Vec<&'static str> = match name {
        "all" => SUITES.to_vec(),
        PLANTED => vec![PLANTED],
        other => vec![*SUITES
            .iter()
            .find(|s| **s == other)
            .ok_or_else(|| VerifyError::UnknownSuite(other.to_owned()))?],
    };
    let mut checks = Vec::new();
    for suite in names {
        let mut r = Report::new(suite);
        match suite {
            "zero-sum" => zero_sum(&mut r),
            "barrier" => barrier(&mut r),
            "tree" => tree(&mut r),
            "e2e" => e2e(&mut r),
            "privacy" => privacy(&mut r, &privacy_configs()),
            "ssp" => ssp(&mut r),
            "fault" => fault(&mut r),
            "costmodel" => costmodel(&mut r),
            "determinism" => determinism(&mut r),
            PLANTED => {
                let mut cfg = JobConfig::template("mask").expect("template");
                cfg.faults.push(FaultSpec {
                    target: Role::Training(0),
                    iteration: 1,
                    action: FaultAction::LeakUnmasked,
                    offset: None,
                });
                privacy(&mut r, &[("planted", cfg)]);
            }
            _ => unreachable!("suite list and dispatch agree"),
        }
        checks.extend(r.checks);
    }
    Ok(checks)
}

const SHAPE: [usize; 2] = [96, 32];

fn zero_sum(r: &mut Report) {
    for n in [1usize, 2, 3, 4, 8, 16, 32, 64] {
        let mut rng = derive_rng(n as u64, "verify:zero-sum");
        let fixed = generate_mask_set(0, n, &SHAPE, Domain::Fixed64, 24, &mut rng).expect("mask set");
        let mut acc = vec![0u128; SHAPE.iter().sum()];
        for m in &fixed.masks {
            for (a, x) in acc.iter_mut().zip(m.residues().expect("fixed")) {
                *a += *x as u128;
            }
        }
        let nonzero = acc.iter().filter(|a| **a % (1u128 << 64) != 0).count();
        r.check(
            format!("fixed64 n={n}"),
            nonzero == 0,
            format!("{nonzero} nonzero coordinates"),
        );

        let float = generate_mask_set(0, n, &SHAPE, Domain::Float32, 0, &mut rng).expect("mask set");
        let mut acc = vec![0f64; SHAPE.iter().sum()];
        for m in &float.masks {
            for (a, x) in acc.iter_mut().zip(m.as_f32().expect("float")) {
                *a += *x as f64;
            }
        }
        let worst = acc.iter().fold(0f64, |w, a| w.max(a.abs()));
        let bound = n as f64 * 2f64.powi(-20);
        r.check(
            format!("float32 n={n}"),
            worst <= bound,
            format!("max |sum| {worst:e}, bound {bound:e}"),
        );
    }
}

fn random_updates(seed: u64, n: usize, domain: Domain, fixed: &FixedPointConfig) -> Vec<GradVector> {
    use rand::Rng;
    let mut rng = derive_rng(seed, "verify:updates");
    (0..n)
        .map(|_| {
            let reals: Vec<f64> = (0..SHAPE.iter().sum::<usize>())
                .map(|_| rng.gen_range(-4.0..4.0))
                .collect();
            GradVector::from_reals(&reals, SHAPE.to_vec(), domain, fixed).expect("in range")
        })
        .collect()
}

fn masked(updates: &[GradVector], masks: &[GradVector]) -> Vec<GradVector> {
    updates
        .iter()
        .zip(masks)
        .map(|(u, m)| u.add(m).expect("same shape"))
        .collect()
}

fn barrier(r: &mut Report) {
    let n = 8;
    let fixed = FixedPointConfig::default();
    let (mut exact, mut worst_rel) = (0, 0f64);
    for seed in 0..50u64 {
        let mut rng = derive_rng(seed, "verify:barrier");
        let updates = random_updates(seed, n, Domain::Fixed64, &fixed);
        let set = generate_mask_set(seed, n, &SHAPE, Domain::Fixed64, fixed.frac_bits, &mut rng)
            .expect("mask set");
        if flat_aggregate(&masked(&updates, &set.masks)).ok() == flat_aggregate(&updates).ok() {
            exact += 1;
        }

        let updates = random_updates(seed, n, Domain::Float32, &fixed);
        let set = generate_mask_set(seed, n, &SHAPE, Domain::Float32, 0, &mut rng).expect("mask set");
        let got = flat_aggregate(&masked(&updates, &set.masks)).expect("non-empty").to_reals();
        let want = flat_aggregate(&updates).expect("non-empty").to_reals();
        let scale = want.iter().fold(0f64, |m, x| m.max(x.abs()));
        let err = got
            .iter()
            .zip(&want)
            .fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        worst_rel = worst_rel.max(err / scale);
    }
    r.check("fixed64 bit-exact", exact == 50, format!("{exact}/50 seeds"));
    r.check(
        "float32 relative error",
        worst_rel <= 1e-4,
        format!("worst {worst_rel:e}"),
    );
}

fn tree(r: &mut Report) {
    let fixed = FixedPointConfig::default();
    let mut failures = Vec::new();
    let mut cases = 0;
    for n in 1..=64usize {
        let updates = random_updates(n as u64, n, Domain::Fixed64, &fixed);
        let flat = flat_aggregate(&updates).expect("non-empty");
        for c in [2usize, 3, 4, 8] {
            cases += 1;
            let plan = match build_tree_plan(n, c) {
                Ok(p) => p,
                Err(e) => {
                    failures.push(format!("n={n} c={c}: {e}"));
                    continue;
                }
            };
            let mut levels = 0;
            while c.pow(levels) < n {
                levels += 1;
            }
            let mut channel = CountingChannel::default();
            let sum = run_tree_aggregation(&plan, &updates, &mut channel);
            let mut sends = vec![0usize; n];
            for (_, e) in &channel.messages {
                sends[e.from] += 1;
            }
            if sum.ok().as_ref() != Some(&flat) {
                failures.push(format!("n={n} c={c}: sum differs"));
            }
            if plan.rounds.len() != levels as usize + 1 {
                failures.push(format!("n={n} c={c}: {} rounds", plan.rounds.len()));
            }
            if sends.iter().any(|s| *s != 1) {
                failures.push(format!("n={n} c={c}: sends {sends:?}"));
            }
            if channel.aggregator_messages() != 1 {
                failures.push(format!("n={n} c={c}: aggregator got {}", channel.aggregator_messages()));
            }
        }
    }
    let detail = match failures.first() {
        Some(f) => format!("{} of {cases} cases failed, first: {f}", failures.len()),
        None => format!("{cases} cases"),
    };
    r.check("sum, rounds, sends, aggregator fan-in", failures.is_empty(), detail);
}

fn e2e(r: &mut Report) {
    let cfg = JobConfig::template("mask").expect("template");
    let Some(mask) = r.job("mask run", &cfg) else {
        return;
    };
    let tree_cfg = JobConfig {
        mode: JobMode::Tree,
        ..cfg.clone()
    };
    let Some(tree) = r.job("tree run", &tree_cfg) else {
        return;
    };
    let oracle = train_centralized(&mask.task, cfg.domain, &cfg.fixed_point(), cfg.iterations())
        .expect("centralized training");
    r.check(
        "mask equals centralized",
        mask.final_checkpoint() == oracle.to_checkpoint(),
        format!("{} iterations", cfg.iterations()),
    );
    r.check(
        "tree equals centralized",
        tree.final_checkpoint() == oracle.to_checkpoint(),
        "",
    );
    r.check(
        "accuracy",
        mask.accuracy >= 0.95,
        format!("{:.4}", mask.accuracy),
    );
}

fn privacy_configs() -> Vec<(&'static str, JobConfig)> {
    ["mask", "tree", "ssp"]
        .into_iter()
        .map(|m| {
            let mut cfg = JobConfig::template(m).expect("template");
            cfg.epochs = 2;
            (m, cfg)
        })
        .collect()
}

/// Plaintext fragments that must never appear in storage: the canary every
/// plaintext batch and checkpoint carries, and each batch's leading features.
fn sentinels(job: &JobResult) -> Vec<Vec<u8>> {
    let mut out = vec![PLAINTEXT_CANARY.to_vec()];
    out.extend(job.task.shards.iter().flatten().map(|b| {
        b.features
            .iter()
            .take(4)
            .flat_map(|x| x.to_le_bytes())
            .collect::<Vec<u8>>()
    }));
    out
}

fn privacy(r: &mut Report, configs: &[(&'static str, JobConfig)]) {
    for (name, cfg) in configs {
        let job = match run_job(cfg) {
            Ok(j) => j,
            Err(e @ SimError::PrivacyViolation { .. }) => {
                r.check(format!("{name} taint"), false, e.to_string());
                continue;
            }
            Err(e) => {
                r.check(format!("{name} run"), false, e.to_string());
                continue;
            }
        };
        let raw: Vec<_> = job
            .taint_log
            .iter()
            .filter(|t| matches!(t.to_role, Role::Aggregator | Role::Admin) && t.label.is_raw())
            .collect();
        r.check(
            format!("{name} taint"),
            raw.is_empty(),
            format!("{} deliveries checked, {} raw", job.taint_log.len(), raw.len()),
        );
        let leaked: Vec<_> = job
            .releases
            .iter()
            .filter(|x| {
                matches!(x.role, Role::Aggregator | Role::Admin)
                    && matches!(x.secret, SecretId::DataKey(_))
            })
            .collect();
        r.check(
            format!("{name} provisioning"),
            leaked.is_empty(),
            format!("{} releases, {} data keys to aggregator/admin", job.releases.len(), leaked.len()),
        );
        let mut hits = Vec::new();
        for s in sentinels(&job) {
            hits.extend(job.store.scan(&s).unwrap_or_default());
        }
        r.check(
            format!("{name} storage scan"),
            hits.is_empty(),
            format!("{} hits", hits.len()),
        );
    }
    let mut cfg = JobConfig::template("mask").expect("template");
    cfg.faults.push(FaultSpec {
        target: Role::Training(2),
        iteration: 0,
        action: FaultAction::Tamper,
        offset: None,
    });
    let (passed, detail) = match run_job(&cfg) {
        Err(SimError::Attestation {
            enclave, releases, ..
        }) => {
            let got = releases.iter().filter(|x| x.enclave_id == enclave).count();
            (got == 0, format!("{enclave} received {got} secrets"))
        }
        Err(e) => (false, e.to_string()),
        Ok(_) => (false, "tampered enclave was admitted".to_owned()),
    };
    r.check("tampered measurement", passed, detail);
}

/// Sum of the participants' gradients against the model they started from.
fn oracle_sum(job: &JobResult, iteration: u64) -> Option<(Vec<usize>, GradVector, GradVector)> {
    let rec = job.aggregates.iter().find(|a| a.iteration == iteration)?;
    let cfg = &job.config;
    let t = rec.model_before.batch as usize;
    let vectors: Vec<GradVector> = rec
        .participants
        .iter()
        .map(|&i| {
            let g = compute_gradients(&job.task.spec, &rec.model_before, &job.task.shards[i][t])
                .expect("gradient");
            GradVector::from_reals(&g, job.task.spec.shape(), cfg.domain, &cfg.fixed_point())
                .expect("in range")
        })
        .collect();
    Some((
        rec.participants.clone(),
        rec.aggregate.clone(),
        flat_aggregate(&vectors).ok()?,
    ))
}

fn ssp(r: &mut Report) {
    let mut cfg = JobConfig::template("ssp").expect("template");
    cfg.epochs = 2;
    let Some(job) = r.job("ssp run", &cfg) else {
        return;
    };
    r.check(
        "completes",
        job.spans.len() as u64 == cfg.iterations(),
        format!("{} of {} iterations", job.spans.len(), cfg.iterations()),
    );
    for f in cfg.faults.iter().filter(|f| matches!(f.action, FaultAction::Delay(_))) {
        match oracle_sum(&job, f.iteration) {
            Some((participants, got, want)) => {
                let Role::Training(straggler) = f.target else {
                    continue;
                };
                r.check(
                    format!("iteration {} excludes {}", f.iteration, f.target),
                    participants.len() == cfg.min_k() && !participants.contains(&straggler),
                    format!("participants {participants:?}"),
                );
                r.check(
                    format!("iteration {} aggregate", f.iteration),
                    got == want,
                    "equals the participants' gradient sum",
                );
            }
            None => r.check(format!("iteration {}", f.iteration), false, "no aggregate"),
        }
    }
}

fn dense_versions(job: &JobResult) -> (bool, String) {
    let ctx_keys: Vec<BlobKey> = {
        let ctx = JobContext::new(job.config.clone()).expect("valid config");
        (0..=job.config.iterations()).map(|t| ctx.version_of(t)).collect()
    };
    let stored = job.store.list(&Namespace::Model).unwrap_or_default();
    (
        stored == ctx_keys,
        format!("{} versions stored, {} expected", stored.len(), ctx_keys.len()),
    )
}

fn fault(r: &mut Report) {
    let cfg = JobConfig::template("mask").expect("template");
    let Some(clean) = r.job("fault-free run", &cfg) else {
        return;
    };
    for (target, iteration) in [(Role::Training(1), 3), (Role::Aggregator, 5)] {
        for mode in [JobMode::Mask, JobMode::Tree] {
            let mut faulty = cfg.clone();
            faulty.mode = mode;
            faulty.faults.push(FaultSpec {
                target,
                iteration,
                action: FaultAction::Crash,
                offset: None,
            });
            let name = format!("{mode} crash {target} at {iteration}");
            let Some(job) = r.job(&name, &faulty) else {
                continue;
            };
            r.check(
                format!("{name}: model"),
                job.final_model_blob == clean.final_model_blob && job.restarts.len() == 1,
                format!("{} restarts", job.restarts.len()),
            );
            let (dense, detail) = dense_versions(&job);
            r.check(format!("{name}: versions"), dense, detail);
        }
    }
}

fn costmodel(r: &mut Report) {
    for n in [2usize, 4, 8] {
        let mut cfg = JobConfig::template("mask").expect("template");
        cfg.n_training = n;
        cfg.epochs = 1;
        let params = match cost_params(&cfg) {
            Ok(p) => p,
            Err(e) => {
                r.check(format!("n={n}"), false, e.to_string());
                continue;
            }
        };
        let Some(job) = r.job(&format!("n={n}"), &cfg) else {
            continue;
        };
        let want = estimate_mask(&params, n);
        let off: Vec<_> = job.spans.iter().filter(|s| s.duration() != want).collect();
        r.check(
            format!("span n={n}"),
            off.is_empty(),
            format!("estimate {want}, {} of {} spans differ", off.len(), job.spans.len()),
        );
    }
    let p = CostParams::default();
    let modes: Vec<Mode> = (1..=256).map(|n| recommend_mode(&p, n, 2)).collect();
    let crossover = modes.iter().position(|m| *m == Mode::Tree).map(|i| i + 1);
    r.check(
        "crossover",
        crossover.is_some(),
        match crossover {
            Some(n) => format!("tree first recommended at n={n}"),
            None => "mask recommended up to n=256".to_owned(),
        },
    );
}

fn determinism(r: &mut Report) {
    for m in ["mask", "tree", "ssp"] {
        let mut cfg = JobConfig::template(m).expect("template");
        cfg.epochs = 3;
        let (Some(a), Some(b)) = (r.job(m, &cfg), r.job(m, &cfg)) else {
            continue;
        };
        r.check(
            m,
            a.metrics_csv() == b.metrics_csv()
                && a.final_model_blob == b.final_model_blob
                && a.trace == b.trace,
            format!("{} trace events", a.trace.len()),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(matches!(run_suite("nope"), Err(VerifyError::UnknownSuite(_))));
    }

    #[test]
    fn fast_suites_pass() {
        for suite in ["zero-sum", "barrier", "costmodel"] {
            for c in run_suite(suite).unwrap() {
                assert!(c.passed, "{c}");
            }
        }
    }

    #[test]
    fn planted_violation_fails() {
        let checks = run_suite(PLANTED).unwrap();
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
        assert_eq!(failed.len(), 1, "{checks:?}");
        assert!(failed[0].name.contains("taint"));
        assert!(failed[0].detail.contains("privacy violation"));
    }
}
