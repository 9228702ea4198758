//! End-to-end runs of the binary on a small configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3

[corpus]
n = 40

[study.population]
n_honest = 14
n_random_clickers = 2
n_speeders = 1
n_constant = 1

[study.design]
ratings_per_video = 8
session_size = 30

[train]
stage1_iters = 6
stage2_iters = 4

[encoder]
steps = 10

[eval]
paired_seeds = 2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hapo-lab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["run", "--config", s(&cfg), "--out-dir", s(&b)]);
    for f in ["report.json", "ckpt.json", "trace.jsonl", "corpus.jsonl", "ratings.csv", "mos.csv", "encoder.json"] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, y, "{f} differs between runs");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
}

#[test]
fn thread_count_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let one = bin().args(["run", "--config", s(&cfg), "--out-dir", s(&a)]).env("HAPO_LAB_THREADS", "1").output().unwrap();
    let four = bin().args(["run", "--config", s(&cfg), "--out-dir", s(&b)]).env("HAPO_LAB_THREADS", "4").output().unwrap();
    assert!(one.status.success() && four.status.success());
    assert_eq!(std::fs::read(a.join("report.json")).unwrap(), std::fs::read(b.join("report.json")).unwrap());
}

#[test]
fn stage_by_stage_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let p = |f: &str| d.join(f);
    ok(&["gen-corpus", "--config", s(&cfg), "--out", s(&p("corpus.jsonl"))]);
    ok(&["simulate-study", "--corpus", s(&p("corpus.jsonl")), "--config", s(&cfg), "--out", s(&p("ratings.csv"))]);
    assert!(p("golden.json").exists());
    ok(&[
        "qc",
        "--ratings",
        s(&p("ratings.csv")),
        "--golden",
        s(&p("golden.json")),
        "--config",
        s(&cfg),
        "--out",
        s(&p("accepted.csv")),
        "--rejects",
        s(&p("rejects.json")),
    ]);
    let rejects: serde_json::Value = serde_json::from_slice(&std::fs::read(p("rejects.json")).unwrap()).unwrap();
    assert!(rejects.as_array().is_some_and(|r| !r.is_empty()), "injected bad raters should be rejected");
    ok(&["aggregate", "--ratings", s(&p("accepted.csv")), "--out", s(&p("mos.csv"))]);
    ok(&["reliability", "--ratings", s(&p("accepted.csv")), "--splits", "10"]);
    ok(&[
        "train",
        "--corpus",
        s(&p("corpus.jsonl")),
        "--mos",
        s(&p("mos.csv")),
        "--config",
        s(&cfg),
        "--out",
        s(&p("ckpt.json")),
        "--trace",
        s(&p("trace.jsonl")),
    ]);
    assert!(p("ckpt.optim.json").exists());
    ok(&[
        "eval",
        "--ckpt",
        s(&p("ckpt.json")),
        "--corpus",
        s(&p("corpus.jsonl")),
        "--mos",
        s(&p("mos.csv")),
        "--config",
        s(&cfg),
        "--out",
        s(&p("report.json")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(p("report.json")).unwrap()).unwrap();
    assert!(report["eval"]["rmse"].as_f64().is_some_and(f64::is_finite));
    let trace = std::fs::read_to_string(p("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 10);
}

#[test]
fn grad_check_exits_zero() {
    let o = ok(&["grad-check", "--n-seeds", "3"]);
    assert!(!o.stdout.is_empty() || !o.stderr.is_empty());
}

#[test]
fn grad_check_with_impossible_tolerance_exits_two() {
    assert_eq!(run(&["grad-check", "--module", "hapo", "--n-seeds", "1", "--tol", "1e-300"]).status.code(), Some(2));
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[hapo]\nk = 1\n").unwrap();
    let out = dir.path().join("c.jsonl");
    assert_eq!(run(&["gen-corpus", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(1));
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["gen-corpus", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(1));
    assert_eq!(run(&["gen-corpus", "--config", "/nonexistent/x.toml", "--out", s(&out)]).status.code(), Some(1));
}

#[test]
fn default_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["default-config"]);
    let p = dir.path().join("d.toml");
    std::fs::write(&p, &o.stdout).unwrap();
    ok(&["gen-corpus", "--config", s(&p), "--out", s(&dir.path().join("c.jsonl"))]);
}

#[test]
fn ablate_writes_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (table, runs) = (dir.path().join("t.csv"), dir.path().join("r.csv"));
    ok(&["ablate", "--config", s(&cfg), "--out", s(&table), "--runs-out", s(&runs)]);
    let t = std::fs::read_to_string(&table).unwrap();
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "variant,n_seeds,plcc,srcc,rmse,krcc,mean_cot_len,mean_entropy,mi_diagnostic,fallback_fraction");
    assert_eq!(lines.len(), 8);
    assert_eq!(std::fs::read_to_string(&runs).unwrap().lines().count(), 1 + 7 * 2);
}
