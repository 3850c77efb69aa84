use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_warmup_requests = 3000
n_online_requests = 6000
n_holdout_requests = 1000

[controller]
min_window_fill = 50

[pool]
min_fill = 20
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rtb-explore"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn missing_config_names_the_path() {
    let out = run(&["run", "--config", "/nonexistent/cfg.toml", "--out", "/tmp/unused-rtb"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/cfg.toml"), "{err}");
}

#[test]
fn unknown_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "[model]\nlearning_rat = 0.1\n");
    let out = run(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn run_writes_artifacts_and_seed_matters() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    for (dir, seed) in [(&a, "1"), (&b, "1"), (&c, "2")] {
        let out = run(&["run", "--config", &cfg, "--seed", seed, "--out", dir.to_str().unwrap(), "--audit"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("group,"));
    }
    for f in ["config.toml", "report.toml", "report.csv", "audit.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let report = |d: &Path| fs::read(d.join("report.toml")).unwrap();
    assert_eq!(report(&a), report(&b));
    assert_ne!(report(&a), report(&c));
    assert_eq!(fs::read(a.join("audit.jsonl")).unwrap(), fs::read(b.join("audit.jsonl")).unwrap());
    let first = fs::read_to_string(a.join("audit.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["phase"], "warmup");
}

#[test]
fn echoed_config_reproduces_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let first = tmp.path().join("first");
    assert!(run(&["run", "--config", &cfg, "--seed", "5", "--out", first.to_str().unwrap()]).status.success());
    let echoed = first.join("config.toml");
    let second = tmp.path().join("second");
    assert!(run(&["run", "--config", echoed.to_str().unwrap(), "--out", second.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(first.join("report.toml")).unwrap(), fs::read(second.join("report.toml")).unwrap());
}

#[test]
fn sweep_aggregates_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let out_dir = tmp.path().join("sweep");
    let out = run(&["sweep", "--config", &cfg, "--seeds", "1,2", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("seed-1/report.toml").exists());
    assert!(out_dir.join("seed-2/report.toml").exists());
    let summary: toml::Value = toml::from_str(&fs::read_to_string(out_dir.join("summary.toml")).unwrap()).unwrap();
    assert_eq!(summary["n_seeds"].as_integer(), Some(2));
    let agg = fs::read_to_string(out_dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 1 + 2 * 3);
}
