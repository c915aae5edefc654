//! Drives the `hybrid-attn` binary end to end in temporary directories.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
model.vocab = 40
model.n_layers = 2
model.layer_pattern = ["hybrid", "hybrid"]
model.embed_init_std = 1.0
model.block.d_model = 16
model.block.h_softmax = 2
model.block.h_lin = 1
model.block.d_head = 8
model.block.chunk = 8
model.block.sub_chunk = 8
model.block.score_init_std = 0.5
model.train.batch = 2
model.train.seq_len = 32
model.train.total_steps = 300
model.train.warmup_steps = 2
model.train.lr = 3e-3
task.n_pairs = 4
task.key_vocab = 16
task.val_vocab = 16
task.seq_len = 32
run.eval_sequences = 6
run.bench_lengths = [64, 128, 256, 512]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hybrid-attn"));
    c.env_remove("HYBRID_ATTN_THREADS");
    c
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin()
        .args(args)
        .args([
            "--config",
            &write_config(dir),
            "--out",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn trained(extra: &[&str]) -> TempDir {
    let dir = TempDir::new().unwrap();
    let mut args = vec!["train"];
    args.extend_from_slice(extra);
    ok(run(dir.path(), &args));
    dir
}

#[test]
fn train_writes_every_artifact_and_learns() {
    let dir = trained(&["--set", "run.eval_every=100"]);
    for f in [
        "config.toml",
        "metrics.jsonl",
        "eval_metrics.jsonl",
        "checkpoint.bin",
        "routing_stats.json",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let metrics = jsonl(&dir.path().join("metrics.jsonl"));
    assert_eq!(metrics.len(), 300);
    for key in ["step", "loss", "lr", "grad_norm", "softmax_fraction"] {
        assert!(metrics[0].get(key).is_some(), "metrics lack {key}");
    }
    let first = metrics[0]["loss"].as_f64().unwrap();
    let last = metrics[299]["loss"].as_f64().unwrap();
    assert!(last < first, "loss {first} → {last}");
    assert_eq!(jsonl(&dir.path().join("eval_metrics.jsonl")).len(), 3);
    let stats = read_json(&dir.path().join("routing_stats.json"));
    let overall = stats["overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&overall));
}

#[test]
fn f64_training_is_reproducible_bytewise() {
    let a = trained(&["--precision", "f64", "--set", "model.train.total_steps=40"]);
    let b = trained(&["--precision", "f64", "--set", "model.train.total_steps=40"]);
    for f in ["checkpoint.bin", "metrics.jsonl", "routing_stats.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let run_with = |threads: &str| {
        let dir = TempDir::new().unwrap();
        let out = bin()
            .env("HYBRID_ATTN_THREADS", threads)
            .args([
                "train",
                "--set",
                "model.train.total_steps=20",
                "--set",
                "model.train.batch=4",
            ])
            .args([
                "--config",
                &write_config(dir.path()),
                "--out",
                dir.path().to_str().unwrap(),
            ])
            .output()
            .unwrap();
        ok(out);
        std::fs::read(dir.path().join("checkpoint.bin")).unwrap()
    };
    assert!(run_with("1") == run_with("3"));
}

#[test]
fn missing_output_dir_fails() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path());
    let missing = dir.path().join("nope");
    let out = bin()
        .args([
            "train",
            "--config",
            &config,
            "--out",
            missing.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!missing.exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    for bad in [
        "model.block.no_such_key=1",
        "model.block.chunk=7",
        "run.routing=\"sometimes\"",
        "task.seq_len=64",
    ] {
        let out = run(dir.path(), &["train", "--set", bad]);
        assert_eq!(
            out.status.code(),
            Some(2),
            "{bad}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn config_echo_reloads_to_the_same_run() {
    let dir = trained(&["--set", "model.train.total_steps=5", "--seed", "9"]);
    let echo = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(echo.contains("model.seed = 9"));
    let again = TempDir::new().unwrap();
    let out = bin()
        .args([
            "train",
            "--config",
            dir.path().join("config.toml").to_str().unwrap(),
        ])
        .args(["--out", again.path().to_str().unwrap()])
        .output()
        .unwrap();
    ok(out);
    let echo2 = std::fs::read_to_string(again.path().join("config.toml")).unwrap();
    assert_eq!(echo, echo2);
    assert_eq!(
        std::fs::read(dir.path().join("checkpoint.bin")).unwrap(),
        std::fs::read(again.path().join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_traces_every_routing_decision() {
    let dir = TempDir::new().unwrap();
    ok(run(
        dir.path(),
        &["train", "--set", "model.train.total_steps=2"],
    ));
    let report = ok(run(dir.path(), &["eval"]));
    assert!(!report.is_empty());
    let eval = read_json(&dir.path().join("eval.json"));
    let acc = eval["accuracy"].as_f64().unwrap();
    // 16 possible values
    assert!(acc < 0.25, "untrained accuracy {acc}");
    let rows = jsonl(&dir.path().join("trace.jsonl"));
    // 2 layers · 1 group · 4 chunks · 6 sequences
    assert_eq!(rows.len(), 2 * 4 * 6);
    assert!(rows
        .iter()
        .all(|r| r["scores"].as_array().map(|s| s.len()) == Some(2)));

    let stats_dir = TempDir::new().unwrap();
    let trace = dir.path().join("trace.jsonl");
    ok(bin()
        .args(["route-stats", "--trace", trace.to_str().unwrap()])
        .args(["--out", stats_dir.path().to_str().unwrap()])
        .output()
        .unwrap());
    assert_eq!(
        read_json(&dir.path().join("routing_stats.json"))["fractions"],
        read_json(&stats_dir.path().join("routing_stats.json"))["fractions"]
    );

    ok(run(dir.path(), &["eval", "--routing", "all_softmax"]));
    let rows = jsonl(&dir.path().join("trace.jsonl"));
    assert!(rows.iter().all(|r| r["choice"] == 0));
    let stats = read_json(&dir.path().join("routing_stats.json"));
    assert_eq!(stats["overall"].as_f64(), Some(1.0));
}

#[test]
fn eval_rejects_a_mismatched_architecture() {
    let dir = TempDir::new().unwrap();
    ok(run(
        dir.path(),
        &["train", "--set", "model.train.total_steps=2"],
    ));
    let out = run(dir.path(), &["eval", "--set", "model.block.d_model=32"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_extends_the_prompt() {
    let dir = TempDir::new().unwrap();
    ok(run(
        dir.path(),
        &["train", "--set", "model.train.total_steps=3"],
    ));
    let text = ok(run(
        dir.path(),
        &["generate", "--prompt", "2,3,4,5,6", "--n-new", "12"],
    ));
    let v: Value = serde_json::from_str(text.lines().last().unwrap()).unwrap();
    let gen = v["generated"].as_array().unwrap();
    assert_eq!(gen.len(), 12);
    assert!(gen.iter().all(|t| t.as_u64().unwrap() < 40));
    let again = ok(run(
        dir.path(),
        &["generate", "--prompt", "2,3,4,5,6", "--n-new", "12"],
    ));
    assert_eq!(text, again);
}

#[test]
fn bench_counts_follow_the_complexity_ratios() {
    let dir = TempDir::new().unwrap();
    ok(run(dir.path(), &["bench", "--flops-only"]));
    let rows = jsonl(&dir.path().join("bench.jsonl"));
    let attention = |routing: &str, len: u64| {
        let r = rows
            .iter()
            .find(|r| r["routing"] == routing && r["len"] == len)
            .unwrap_or_else(|| panic!("no row for {routing} at {len}"));
        r["counted"]["attn_softmax"].as_f64().unwrap()
            + r["counted"]["attn_linear"].as_f64().unwrap()
    };
    let lin = attention("all_linear", 512) / attention("all_linear", 256);
    let soft = attention("all_softmax", 512) / attention("all_softmax", 256);
    assert!((1.9..=2.1).contains(&lin), "all-linear doubling {lin}");
    assert!((3.6..=4.4).contains(&soft), "all-softmax doubling {soft}");
    let fit = read_json(&dir.path().join("bench_fit.json"));
    assert!(fit["a"].as_f64().unwrap() > 0.0);
}
