//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdicts show up in plain `cargo test` output.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::{BigInt, BigUint};
use rand::Rng;

use citadel::aggregation::{build_tree_plan, flat_aggregate, run_tree_aggregation, CountingChannel, Target};
use citadel::cas::{Role, SecretId};
use citadel::config::{FaultAction, FaultSpec, JobConfig, JobMode};
use citadel::costmodel::{estimate_mask, recommend_mode, CostParams, Mode};
use citadel::crypto::derive_rng;
use citadel::enclaves::MsgType;
use citadel::masking::generate_mask_set;
use citadel::models::{compute_gradients, ModelState, ToyTask, PLAINTEXT_CANARY};
use citadel::simnet::{cost_params, run_job, JobResult, SimError};
use citadel::storage::{BlobKey, Namespace};
use citadel::tensors::{Domain, FixedPointConfig, GradVector};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn job(cfg: &JobConfig) -> Result<JobResult, String> {
    run_job(cfg).map_err(|e| e.to_string())
}

fn template(name: &str) -> JobConfig {
    JobConfig::template(name).expect("known template")
}

fn two_64() -> BigInt {
    BigInt::from(1u128 << 64)
}

/// Exact sum of residues, reduced into [0, 2^64).
fn big_sum<'a>(vectors: impl IntoIterator<Item = &'a GradVector>, len: usize) -> Vec<BigInt> {
    let mut acc = vec![BigInt::from(0); len];
    for v in vectors {
        for (a, r) in acc.iter_mut().zip(v.residues().expect("fixed64")) {
            *a += BigInt::from(*r);
        }
    }
    acc.into_iter().map(|a| ((a % two_64()) + two_64()) % two_64()).collect()
}

fn residues_as_big(v: &GradVector) -> Vec<BigInt> {
    v.residues().expect("fixed64").iter().map(|r| BigInt::from(*r)).collect()
}

/// `x * 2^149` as an exact integer; every finite f32 is a multiple of 2^-149.
fn f32_scaled(x: f32) -> BigInt {
    let bits = x.to_bits();
    let exp = (bits >> 23) & 0xff;
    let mant = bits & 0x7f_ffff;
    let magnitude = if exp == 0 {
        BigInt::from(mant)
    } else {
        BigInt::from(mant | 0x80_0000) << (exp - 1)
    };
    if bits >> 31 == 1 {
        -magnitude
    } else {
        magnitude
    }
}

fn exact_f32_sum<'a>(vectors: impl IntoIterator<Item = &'a GradVector>, len: usize) -> Vec<BigInt> {
    let mut acc = vec![BigInt::from(0); len];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v.as_f32().expect("float32")) {
            *a += f32_scaled(*x);
        }
    }
    acc
}

fn big_to_f64_scaled(x: &BigInt) -> f64 {
    // magnitudes here stay far below 2^1023 after the 2^-149 factor
    let s = x.to_string();
    s.parse::<f64>().expect("decimal") * 2f64.powi(-149)
}

const SHAPE: [usize; 2] = [48, 16];
const LEN: usize = 64;

fn zero_sum_exactness() -> Outcome {
    let mut worst_ratio = 0f64;
    for n in [1usize, 2, 3, 4, 8, 16, 32, 64] {
        for trial in 0..4u64 {
            let mut rng = derive_rng(1000 * n as u64 + trial, "acceptance:zero-sum");
            let set = generate_mask_set(trial, n, &SHAPE, Domain::Fixed64, 24, &mut rng)
                .map_err(|e| e.to_string())?;
            let sum = big_sum(&set.masks, LEN);
            ensure(sum.iter().all(|x| *x == BigInt::from(0)), || {
                format!("fixed64 n={n} trial {trial}: masks do not sum to zero")
            })?;

            let set = generate_mask_set(trial, n, &SHAPE, Domain::Float32, 0, &mut rng)
                .map_err(|e| e.to_string())?;
            let bound = BigUint::from(n) << 129u32; // n * 2^-20, scaled by 2^149
            for s in exact_f32_sum(&set.masks, LEN) {
                ensure(s.magnitude() <= &bound, || {
                    format!("float32 n={n}: |sum| {} exceeds n*2^-20", big_to_f64_scaled(&s))
                })?;
                let ratio = big_to_f64_scaled(&s).abs() / (n as f64 * 2f64.powi(-20));
                worst_ratio = worst_ratio.max(ratio);
            }
        }
    }
    Ok(format!("fixed64 exact zero; float32 worst |sum|/(N*2^-20) = {worst_ratio:.3}"))
}

fn random_reals(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, "acceptance:updates");
    (0..n)
        .map(|_| (0..LEN).map(|_| rng.gen_range(-8.0..8.0)).collect())
        .collect()
}

fn barrier_equivalence() -> Outcome {
    let n = 8;
    let fixed = FixedPointConfig::default();
    let mut worst = 0f64;
    for seed in 0..50u64 {
        let reals = random_reals(seed, n);
        let mut rng = derive_rng(seed, "acceptance:barrier");

        let updates: Vec<GradVector> = reals
            .iter()
            .map(|r| GradVector::from_reals(r, SHAPE.to_vec(), Domain::Fixed64, &fixed).unwrap())
            .collect();
        let set = generate_mask_set(seed, n, &SHAPE, Domain::Fixed64, fixed.frac_bits, &mut rng)
            .map_err(|e| e.to_string())?;
        let masked: Vec<GradVector> = updates.iter().zip(&set.masks).map(|(u, m)| u.add(m).unwrap()).collect();
        let got = flat_aggregate(&masked).map_err(|e| e.to_string())?;
        ensure(residues_as_big(&got) == big_sum(&updates, LEN), || {
            format!("seed {seed}: fixed64 masked aggregate differs from the plain sum")
        })?;

        let updates: Vec<GradVector> = reals
            .iter()
            .map(|r| GradVector::from_reals(r, SHAPE.to_vec(), Domain::Float32, &fixed).unwrap())
            .collect();
        let set = generate_mask_set(seed, n, &SHAPE, Domain::Float32, 0, &mut rng)
            .map_err(|e| e.to_string())?;
        let masked: Vec<GradVector> = updates.iter().zip(&set.masks).map(|(u, m)| u.add(m).unwrap()).collect();
        let got = flat_aggregate(&masked).map_err(|e| e.to_string())?.to_reals();
        let want: Vec<f64> = exact_f32_sum(&updates, LEN).iter().map(big_to_f64_scaled).collect();
        let scale = want.iter().fold(0f64, |m, x| m.max(x.abs()));
        let err = got.iter().zip(&want).fold(0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(err / scale);
    }
    ensure(worst <= 1e-4, || format!("float32 relative error {worst:e} > 1e-4"))?;
    Ok(format!("50 seeds bit-exact in fixed64; float32 worst relative error {worst:.2e}"))
}

fn tree_equivalence() -> Outcome {
    let fixed = FixedPointConfig::default();
    let mut cases = 0;
    for n in 1..=64usize {
        let updates: Vec<GradVector> = random_reals(n as u64, n)
            .iter()
            .map(|r| GradVector::from_reals(r, SHAPE.to_vec(), Domain::Fixed64, &fixed).unwrap())
            .collect();
        let oracle = big_sum(&updates, LEN);
        for c in [2usize, 3, 4, 8] {
            cases += 1;
            let plan = build_tree_plan(n, c).map_err(|e| e.to_string())?;
            let mut channel = CountingChannel::default();
            let sum = run_tree_aggregation(&plan, &updates, &mut channel).map_err(|e| e.to_string())?;
            ensure(residues_as_big(&sum) == oracle, || format!("n={n} c={c}: sum differs"))?;

            // ceil(log_c n) by exact integer powers
            let levels = (0..).find(|&l| BigUint::from(c).pow(l) >= BigUint::from(n)).unwrap() as usize;
            ensure(plan.rounds.len() == levels + 1, || {
                format!("n={n} c={c}: {} rounds, want {}", plan.rounds.len(), levels + 1)
            })?;
            let mut sends = vec![0; n];
            for (_, e) in &channel.messages {
                sends[e.from] += 1;
            }
            ensure(sends.iter().all(|s| *s == 1), || format!("n={n} c={c}: sends {sends:?}"))?;
            let to_agg = channel.messages.iter().filter(|(_, e)| e.to == Target::Aggregator).count();
            ensure(to_agg == 1, || format!("n={n} c={c}: aggregator received {to_agg}"))?;
        }
    }
    // the same shape holds inside the simulator
    for (n, c) in [(1, 2), (5, 2), (7, 3), (9, 8)] {
        let mut cfg = template("tree");
        cfg.n_training = n;
        cfg.children_c = c;
        cfg.epochs = 1;
        let r = job(&cfg)?;
        for t in 0..cfg.iterations() {
            let got = r
                .taint_log
                .iter()
                .filter(|d| d.iteration == t && d.to_role == Role::Aggregator && d.msg_type == MsgType::Update)
                .count();
            ensure(got == 1, || format!("simulated n={n} c={c} iteration {t}: {got} updates"))?;
        }
    }
    Ok(format!("{cases} (n, c) cases plus 4 simulated jobs"))
}

/// Plain synchronous SGD written out directly: encode each owner's
/// gradient, sum exactly, decode, average, clip, step.
fn plain_sgd(task: &ToyTask, cfg: &JobConfig) -> ModelState {
    let fixed = cfg.fixed_point();
    let scale = (1u64 << fixed.frac_bits) as f64;
    let k = task.shards.len() as f64;
    let per_epoch = cfg.batches_per_epoch;
    let mut state = task.spec.initial_state();
    for step in 0..cfg.iterations() {
        let batch = (step % per_epoch) as usize;
        let mut sum = vec![BigInt::from(0); task.spec.param_count()];
        for shard in &task.shards {
            let g = compute_gradients(&task.spec, &state, &shard[batch]).unwrap();
            for (s, x) in sum.iter_mut().zip(&g) {
                *s += BigInt::from((x * scale).round() as i64);
            }
        }
        let mean: Vec<f64> = sum
            .iter()
            .map(|s| i64::try_from(s).expect("no overflow") as f64 / scale / k)
            .collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        let clip = cfg.model.clip_norm;
        let g: Vec<f64> = if norm <= clip {
            mean
        } else {
            mean.iter().map(|x| x * (clip / norm)).collect()
        };
        let lr = cfg.model.lr * cfg.model.lr_decay.powi((step / cfg.model.lr_decay_every.unwrap_or(u64::MAX)) as i32);
        let w: Vec<f32> = state
            .weights
            .to_reals()
            .iter()
            .zip(&g)
            .map(|(w, g)| (w - lr * g) as f32)
            .collect();
        state = ModelState {
            weights: GradVector::from_f32(w, state.weights.shape().to_vec()).unwrap(),
            epoch: (step + 1) / per_epoch,
            batch: (step + 1) % per_epoch,
        };
    }
    state
}

fn end_to_end() -> Outcome {
    let cfg = template("mask");
    ensure(cfg.n_training == 4 && cfg.iterations() == 200 && cfg.domain == Domain::Fixed64, || {
        "mask template is not the N=4, 200-iteration Fixed64 job".into()
    })?;
    let mask = job(&cfg)?;
    let tree = job(&JobConfig {
        mode: JobMode::Tree,
        ..cfg.clone()
    })?;
    let oracle = plain_sgd(&mask.task, &cfg);
    ensure(mask.final_checkpoint() == oracle.to_checkpoint(), || {
        "mask-mode model differs from plain SGD".into()
    })?;
    ensure(tree.final_checkpoint() == oracle.to_checkpoint(), || {
        "tree-mode model differs from plain SGD".into()
    })?;
    ensure(mask.accuracy >= 0.95, || format!("accuracy {:.4} < 0.95", mask.accuracy))?;
    Ok(format!(
        "mask, tree and plain SGD byte-identical after {} iterations; accuracy {:.4}",
        cfg.iterations(),
        mask.accuracy
    ))
}

fn privacy_invariants() -> Outcome {
    let mut deliveries = 0;
    for name in ["mask", "tree", "ssp"] {
        let r = job(&template(name))?;
        deliveries += r.taint_log.len();
        let raw = r
            .taint_log
            .iter()
            .filter(|d| matches!(d.to_role, Role::Aggregator | Role::Admin) && d.label.is_raw())
            .count();
        ensure(raw == 0, || format!("{name}: {raw} raw deliveries to aggregator/admin"))?;
        let data_keys = r
            .releases
            .iter()
            .filter(|x| matches!(x.role, Role::Aggregator | Role::Admin) && matches!(x.secret, SecretId::DataKey(_)))
            .count();
        ensure(data_keys == 0, || format!("{name}: {data_keys} data keys released to aggregator/admin"))?;
        ensure(r.releases.iter().any(|x| matches!(x.secret, SecretId::DataKey(_))), || {
            format!("{name}: provisioning log has no data-key releases at all")
        })?;
        let mut needles = vec![PLAINTEXT_CANARY.to_vec()];
        for b in r.task.shards.iter().flatten() {
            needles.push(b.features[..4].iter().flat_map(|x| x.to_le_bytes()).collect());
        }
        for key in r.store.keys().map_err(|e| e.to_string())? {
            let raw = r.store.raw(&key).map_err(|e| e.to_string())?;
            for n in &needles {
                ensure(!raw.windows(n.len()).any(|w| w == n.as_slice()), || {
                    format!("{name}: plaintext found in {key}")
                })?;
            }
        }
    }
    let mut cfg = template("mask");
    cfg.faults.push(FaultSpec {
        target: Role::Training(1),
        iteration: 0,
        action: FaultAction::Tamper,
        offset: None,
    });
    match run_job(&cfg) {
        Err(SimError::Attestation {
            enclave,
            releases,
            denials,
            ..
        }) => {
            let got = releases.iter().filter(|x| x.enclave_id == enclave).count();
            ensure(got == 0, || format!("tampered {enclave} received {got} secrets"))?;
            ensure(!denials.is_empty(), || "no denial recorded for the tampered enclave".into())?;
        }
        Err(e) => return Err(format!("tampered fixture failed differently: {e}")),
        Ok(_) => return Err("tampered fixture ran to completion".into()),
    }
    Ok(format!("{deliveries} deliveries clean; storage scan clean; tampered enclave got 0 secrets"))
}

fn straggler_ssp() -> Outcome {
    let cfg = template("ssp");
    let straggler = cfg
        .faults
        .iter()
        .find(|f| matches!(f.action, FaultAction::Delay(_)))
        .expect("ssp template delays one enclave");
    let Role::Training(late) = straggler.target else {
        return Err("straggler is not a training enclave".into());
    };
    ensure(cfg.n_training == 4 && cfg.min_k() == 3, || "ssp template is not N=4, K=3".into())?;
    let r = job(&cfg)?;
    ensure(r.spans.len() as u64 == cfg.iterations(), || "job did not complete".into())?;
    let rec = r
        .aggregates
        .iter()
        .find(|a| a.iteration == straggler.iteration)
        .ok_or("no aggregate for the straggler iteration")?;
    ensure(rec.participants.len() == 3 && !rec.participants.contains(&late), || {
        format!("participants {:?}", rec.participants)
    })?;
    let fixed = cfg.fixed_point();
    let scale = (1u64 << fixed.frac_bits) as f64;
    let t = rec.model_before.batch as usize;
    let mut oracle = vec![BigInt::from(0); r.task.spec.param_count()];
    for &i in &rec.participants {
        let g = compute_gradients(&r.task.spec, &rec.model_before, &r.task.shards[i][t]).unwrap();
        for (s, x) in oracle.iter_mut().zip(&g) {
            *s += BigInt::from((x * scale).round() as i64);
        }
    }
    let oracle: Vec<BigInt> = oracle.into_iter().map(|x| ((x % two_64()) + two_64()) % two_64()).collect();
    ensure(residues_as_big(&rec.aggregate) == oracle, || {
        "aggregate differs from the oracle sum of the 3 participants".into()
    })?;
    Ok(format!(
        "iteration {} used {:?}, aggregate exact; {} iterations completed",
        straggler.iteration,
        rec.participants,
        r.spans.len()
    ))
}

fn dense(r: &JobResult) -> bool {
    let bpe = r.config.batches_per_epoch;
    let want: Vec<BlobKey> = (0..=r.config.iterations()).map(|t| BlobKey::model(t / bpe, t % bpe)).collect();
    r.store.list(&Namespace::Model).ok() == Some(want)
}

fn fault_tolerance() -> Outcome {
    let cfg = template("mask");
    let clean = job(&cfg)?;
    ensure(dense(&clean), || "fault-free versions not dense".into())?;
    for (target, iteration) in [(Role::Training(1), 3), (Role::Aggregator, 5)] {
        let mut faulty = cfg.clone();
        faulty.faults.push(FaultSpec {
            target,
            iteration,
            action: FaultAction::Crash,
            offset: None,
        });
        let r = job(&faulty)?;
        ensure(r.restarts.len() == 1, || format!("{target}: {} restarts", r.restarts.len()))?;
        ensure(r.final_model_blob == clean.final_model_blob, || {
            format!("crash of {target} changed the final model")
        })?;
        ensure(dense(&r), || format!("crash of {target}: versions not dense"))?;
    }
    Ok("training-1 at 3 and aggregator at 5: final model identical, versions dense".into())
}

fn cost_model_consistency() -> Outcome {
    let mut spans = Vec::new();
    for n in [2usize, 4, 8] {
        let mut cfg = template("mask");
        cfg.n_training = n;
        cfg.epochs = 2;
        let p = cost_params(&cfg).map_err(|e| e.to_string())?;
        let want = estimate_mask(&p, n);
        let r = job(&cfg)?;
        for s in &r.spans {
            ensure(s.duration() == want, || {
                format!("n={n} iteration {}: span {} vs estimate {want}", s.iteration, s.duration())
            })?;
        }
        spans.push(format!("N={n}:{want}"));
    }
    let p = CostParams::default();
    let first_tree = (1..=256).find(|&n| recommend_mode(&p, n, 2) == Mode::Tree);
    let Some(cross) = first_tree else {
        return Err("no mask-to-tree crossover up to N=256".into());
    };
    ensure(recommend_mode(&p, 1, 2) == Mode::Mask, || "N=1 does not recommend mask".into())?;
    Ok(format!("spans equal estimates ({}); tree first recommended at N={cross}", spans.join(" ")))
}

fn determinism() -> Outcome {
    let mut crash = template("tree");
    crash.faults.push(FaultSpec {
        target: Role::Training(2),
        iteration: 7,
        action: FaultAction::Crash,
        offset: Some(13),
    });
    for (name, cfg) in [("mask", template("mask")), ("tree", template("tree")), ("ssp", template("ssp")), ("tree+crash", crash)] {
        let (a, b) = (job(&cfg)?, job(&cfg)?);
        ensure(a.metrics_csv().into_bytes() == b.metrics_csv().into_bytes(), || {
            format!("{name}: metrics CSV differs")
        })?;
        ensure(a.final_model_blob == b.final_model_blob, || format!("{name}: model blob differs"))?;
    }
    Ok("mask, tree, ssp, tree+crash: identical CSV and model bytes".into())
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("zero-sum exactness", Duration::from_secs(10), zero_sum_exactness),
        ("barrier equivalence", Duration::from_secs(30), barrier_equivalence),
        ("tree equivalence and structure", Duration::from_secs(60), tree_equivalence),
        ("end-to-end learning equivalence", Duration::from_secs(120), end_to_end),
        ("privacy invariants", Duration::from_secs(60), privacy_invariants),
        ("straggler correctness", Duration::MAX, straggler_ssp),
        ("fault tolerance", Duration::MAX, fault_tolerance),
        ("cost-model consistency", Duration::MAX, cost_model_consistency),
        ("determinism", Duration::MAX, determinism),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > *limit => Err(format!("{d}; took {took:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({took:.1?}) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({took:.1?}) {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
