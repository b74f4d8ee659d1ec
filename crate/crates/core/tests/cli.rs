use std::path::Path;
use std::process::{Command, Output};

fn citadel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_citadel")).args(args).output().unwrap()
}

fn write_config(dir: &Path, template: &str, edit: impl Fn(String) -> String) -> String {
    let out = citadel(&["gen-config", "--template", template]);
    assert!(out.status.success());
    let path = dir.join(format!("{template}.toml"));
    std::fs::write(&path, edit(String::from_utf8(out.stdout).unwrap())).unwrap();
    path.to_str().unwrap().to_owned()
}

fn short(s: String) -> String {
    s.replace("epochs = 20", "epochs = 2")
}

#[test]
fn run_writes_outputs_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mask", short);
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = citadel(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let summary = String::from_utf8(out.stdout).unwrap();
        assert!(summary.starts_with("mode=mask n=4 iterations=20 accuracy="), "{summary}");
        for f in ["metrics.csv", "model.bin", "provisioning.csv", "taint.csv"] {
            assert!(out_dir.join(f).exists(), "{f}");
        }
        csvs.push(std::fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert!(csvs[0].starts_with(b"iteration,enclave_id,phase,duration,bytes_sent,bytes_recv,messages\n"));

    let out_dir = dir.path().join("c");
    let out = citadel(&["run", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed-override", "3"]);
    assert!(out.status.success());
    assert_ne!(std::fs::read(out_dir.join("model.bin")).unwrap(), std::fs::read(dir.path().join("a/model.bin")).unwrap());
}

#[test]
fn validation_failure_exits_2_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tree", |s| s.replace("children_c = 2", "children_c = 1"));
    let out = citadel(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("children_c"));
    assert!(!dir.path().join("o").exists());

    let cfg = write_config(dir.path(), "mask", |s| s.replace("seed = 7", "seed = 7\ncolour = 1"));
    assert_eq!(citadel(&["run", "--config", &cfg, "--out", "/tmp/x"]).status.code(), Some(2));
    assert_eq!(citadel(&["run", "--config", "/nonexistent.toml", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn privacy_violation_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mask", |s| {
        short(s).replace(
            "faults = []",
            "faults = [{ target = \"training-0\", iteration = 1, action = \"leak_unmasked\" }]",
        )
    });
    let out = citadel(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RawGradient"));
}

#[test]
fn costmodel_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "mask", |s| s);
    let out = citadel(&["costmodel", "--config", &cfg, "--n", "1..8", "--c", "2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("n,c,t_mask,t_tree,recommended"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 8);
    let t_mask: Vec<u64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(t_mask.windows(2).all(|w| w[0] < w[1]));

    let out = citadel(&["costmodel", "--config", &cfg, "--n", "1..64", "--c", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let recs: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    let flips = recs.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(flips, 1, "{recs:?}");

    let out = citadel(&["costmodel", "--config", &cfg, "--n", "16", "--c", "2,4,8"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let tree: Vec<u64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(tree.len(), 3);

    assert_eq!(citadel(&["costmodel", "--config", &cfg, "--n", "9..3", "--c", "2"]).status.code(), Some(2));
    assert_eq!(citadel(&["costmodel", "--config", &cfg, "--n", "1..3", "--c", "1"]).status.code(), Some(2));
}

#[test]
fn verify_and_gen_config() {
    let out = citadel(&["verify", "--suite", "zero-sum"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).lines().all(|l| l.starts_with("PASS")));

    let out = citadel(&["verify", "--suite", "planted-violation"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL planted-violation/planted taint"));

    assert_eq!(citadel(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(citadel(&["gen-config", "--template", "ring"]).status.code(), Some(2));
    assert_eq!(citadel(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(citadel(&["run", "--config", "x", "--out", "y", "--fast"]).status.code(), Some(2));

    for t in ["mask", "tree", "ssp"] {
        let out = citadel(&["gen-config", "--template", t]);
        let text = String::from_utf8(out.stdout).unwrap();
        assert!(citadel::config::JobConfig::from_toml(&text).is_ok(), "{t}");
    }
}
