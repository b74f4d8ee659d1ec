use std::collections::BTreeMap;
use std::sync::Arc;

use citadel::cas::Role;
use citadel::config::{FaultAction, FaultSpec, JobConfig, JobMode};
use citadel::enclaves::{MsgType, Phase};
use citadel::simnet::{emit_metrics, metrics_csv, run_job, run_job_with_store, SimError, METRICS_HEADER};
use citadel::storage::DirStore;

fn small(mode: &str, epochs: u64) -> JobConfig {
    let mut cfg = JobConfig::template(mode).unwrap();
    cfg.epochs = epochs;
    cfg
}

#[test]
fn phases_partition_each_span() {
    for mode in ["mask", "tree", "ssp"] {
        let r = run_job(&small(mode, 2)).unwrap();
        let mut per: BTreeMap<(u64, &str), u64> = BTreeMap::new();
        for m in &r.metrics {
            *per.entry((m.iteration, m.enclave_id.as_str())).or_default() += m.duration;
        }
        for s in &r.spans {
            let ids: Vec<_> = per.keys().filter(|(i, _)| *i == s.iteration).collect();
            assert_eq!(ids.len(), r.config.n_training + 1 + r.config.mode.uses_masks() as usize);
            for key in ids {
                assert_eq!(per[key], s.duration(), "{mode} {key:?}");
            }
        }
    }
}

#[test]
fn byte_counters_are_conserved() {
    for mode in ["mask", "tree", "ssp"] {
        let r = run_job(&small(mode, 2)).unwrap();
        let sent: u64 = r.metrics.iter().map(|m| m.bytes_sent).sum();
        let recv: u64 = r.metrics.iter().map(|m| m.bytes_recv).sum();
        assert_eq!(sent, r.bytes_sent);
        assert_eq!(recv, r.bytes_recv);
        assert_eq!(sent, recv + r.bytes_in_flight, "{mode}");
        let logged: u64 = r.taint_log.iter().map(|t| t.bytes).sum();
        assert_eq!(logged, recv);
    }
}

#[test]
fn tree_phases_are_training_and_recursive() {
    let r = run_job(&small("tree", 1)).unwrap();
    assert!(r
        .metrics
        .iter()
        .filter(|m| m.enclave_id.starts_with("training"))
        .all(|m| matches!(m.phase, Phase::Training | Phase::Recursive)));
    assert!(r.metrics.iter().all(|m| m.phase != Phase::Masking));
}

#[test]
fn mask_aggregation_grows_with_n_and_tree_fan_in_stays_one() {
    let mut last = 0;
    for n in [2, 4, 8, 16] {
        let mut cfg = small("mask", 1);
        cfg.n_training = n;
        let r = run_job(&cfg).unwrap();
        let agg: u64 = r
            .metrics
            .iter()
            .filter(|m| m.iteration == 0 && m.enclave_id.starts_with("aggregator") && m.phase == Phase::Aggregation)
            .map(|m| m.duration)
            .sum();
        assert!(agg >= last, "n={n}: {agg} < {last}");
        last = agg;

        cfg.mode = JobMode::Tree;
        let r = run_job(&cfg).unwrap();
        let updates = r
            .taint_log
            .iter()
            .filter(|t| t.iteration == 0 && t.to_role == Role::Aggregator && t.msg_type == MsgType::Update)
            .count();
        assert_eq!(updates, 1);
    }
}

#[test]
fn metrics_csv_shape() {
    assert_eq!(metrics_csv(&[]), format!("{METRICS_HEADER}\n"));
    let r = run_job(&small("mask", 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    emit_metrics(&r.metrics, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), r.metrics_csv());
    assert!(emit_metrics(&r.metrics, &dir.path().join("missing/m.csv")).is_err());
}

#[test]
fn directory_store_matches_memory_store() {
    let cfg = small("tree", 1);
    let dir = tempfile::tempdir().unwrap();
    let on_disk = run_job_with_store(&cfg, Arc::new(DirStore::open(dir.path()).unwrap())).unwrap();
    let in_memory = run_job(&cfg).unwrap();
    assert_eq!(on_disk.final_model_blob, in_memory.final_model_blob);
    assert_eq!(on_disk.metrics_csv(), in_memory.metrics_csv());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() > 0);
}

#[test]
fn invalid_config_is_rejected_before_running() {
    let mut cfg = small("tree", 1);
    cfg.children_c = 1;
    match run_job(&cfg) {
        Err(SimError::Config(e)) => assert_eq!(e.field, "children_c"),
        other => panic!("expected a config error, got {:?}", other.err()),
    }
}

#[test]
fn ssp_below_quorum_restarts_until_the_limit() {
    let mut cfg = small("ssp", 1);
    cfg.ssp.as_mut().unwrap().min_k = 4;
    cfg.max_restarts = 3;
    // every attempt of iteration 2 loses training-3
    assert!(matches!(run_job(&cfg), Err(SimError::TooManyRestarts(3))));
}

#[test]
fn crash_with_different_seed_still_matches_its_own_clean_run() {
    for seed in [1u64, 99] {
        let mut cfg = small("mask", 2);
        cfg.seed = seed;
        let clean = run_job(&cfg).unwrap();
        cfg.faults.push(FaultSpec {
            target: Role::Admin,
            iteration: 4,
            action: FaultAction::Crash,
            offset: Some(3),
        });
        let r = run_job(&cfg).unwrap();
        assert_eq!(r.restarts.len(), 1);
        assert_eq!(r.final_model_blob, clean.final_model_blob);
    }
}

#[test]
fn held_secrets_were_provisioned() {
    let r = run_job(&small("mask", 1)).unwrap();
    for e in &r.enclaves {
        let record = r.cas.enclave(&e.id).expect("attested");
        for s in &e.held_secrets {
            assert!(record.provisioned.contains(s), "{} holds unprovisioned {s}", e.id);
        }
    }
}
