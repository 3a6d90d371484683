use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_coop-explain"));
    c.env_remove("COOP_EXPLAIN_BRIDGE");
    c
}

fn config(dir: &Path, out: &str, planted_seed: u64) -> PathBuf {
    let cfg = json!({
        "output_dir": dir.join(out),
        "corpus": {"planted": {
            "num_classes": 3, "num_docs": 600, "keywords_per_class": 1, "associated_per_class": 4,
            "filler_size": 30, "min_len": 8, "max_len": 14, "keyword_rate": 0.12, "seed": planted_seed}},
        "mcts": {"playouts_per_token": 20, "max_length": 12, "rollout_max_tokens": 12},
        "explainer": {"texts_per_class": 30},
        "eval": {"threshold": 0.5, "ks": [5, 10, 20], "top_k": 20, "max_texts": 100,
                 "sweep_sizes": [10, 20], "sweep_seeds": [0]}
    });
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn run(cfg: &Path, args: &[&str]) -> Output {
    bin().arg("-c").arg(cfg).args(args).output().unwrap()
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = run(cfg, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Trains both models and explains.
fn pipeline(cfg: &Path, extra: &[&str]) {
    ok(cfg, &["train-lm"]);
    ok(cfg, &["train-glassbox"]);
    let mut args = vec!["explain"];
    args.extend_from_slice(extra);
    ok(cfg, &args);
}

#[test]
fn missing_config_exits_with_two() {
    let out = bin()
        .args(["explain", "-c", "/definitely/not/here.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.starts_with("config_not_found: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    let out = run(&cfg, &["train-lm", "--mcts.cpuct=2"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("config_invalid: "));
    let out = run(&cfg, &["train-lm", "--mcts.playouts_per_token=0"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"sed": 1}"#).unwrap();
    let out = run(&bad, &["train-lm"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown field"));
}

#[test]
fn missing_artifacts_fail_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    let out = run(&cfg, &["explain"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.starts_with("missing_artifact: ") && err.contains("train-glassbox"),
        "{err}"
    );
}

#[test]
fn explain_recovers_planted_keywords() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    pipeline(&cfg, &[]);
    let csv = fs::read_to_string(dir.path().join("a/explanation.csv")).unwrap();
    let mut rows = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>());
    for c in 0..3 {
        let class = format!("c{c}");
        let top5: Vec<String> = rows
            .by_ref()
            .filter(|r| r[0] == class)
            .take(5)
            .map(|r| r[1].to_owned())
            .collect();
        assert!(top5.contains(&format!("key{c}x0")), "{class}: {top5:?}");
    }
}

#[test]
fn glassbox_weights_evaluate_to_perfect_rho() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    ok(&cfg, &["train-glassbox"]);
    let importance = dir.path().join("a/glassbox_importance.csv");
    let summary = ok(
        &cfg,
        &["evaluate", "--explanation", importance.to_str().unwrap()],
    );
    assert!(summary.contains("mean rho"));
    let report = read_json(dir.path().join("a/report.json"));
    let classes = report["body"]["classes"].as_array().unwrap();
    assert_eq!(classes.len(), 3);
    for c in classes {
        assert_eq!(c["spearman"]["rho"].as_f64().unwrap(), 1.0);
    }
    assert!(dir.path().join("a/pr_curve.csv").exists());
    assert!(dir.path().join("a/flip_curve.csv").exists());
}

#[test]
fn artifacts_carry_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    pipeline(&cfg, &[]);
    let summary = ok(&cfg, &["evaluate"]);
    let hash = summary
        .lines()
        .find_map(|l| l.strip_prefix("config hash"))
        .unwrap()
        .trim()
        .to_owned();
    assert_eq!(hash.len(), 16);
    let out = dir.path().join("a");
    for f in ["lm.json", "glassbox.json", "report.json"] {
        assert_eq!(read_json(out.join(f))["config_hash"], hash.as_str(), "{f}");
    }
    assert_eq!(
        read_json(out.join("explanation.json"))["metadata"]["config_hash"],
        hash.as_str()
    );
    for line in fs::read_to_string(out.join("samples.jsonl"))
        .unwrap()
        .lines()
    {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["config_hash"], hash.as_str());
    }
    let manifest = read_json(out.join("manifest.json"));
    for f in [
        "explanation.csv",
        "pr_curve.csv",
        "flip_curve.csv",
        "glassbox_importance.csv",
    ] {
        assert_eq!(manifest[f]["config_hash"], hash.as_str(), "{f}");
    }
    // Timestamps are confined to the run log.
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.contains(&hash) && l.ends_with(" ok")));
}

#[test]
fn same_config_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "a", 0);
    let b = config(dir.path(), "b", 0);
    pipeline(&a, &[]);
    pipeline(&b, &["--workers", "2"]);
    ok(&a, &["evaluate"]);
    ok(&b, &["evaluate"]);
    for f in [
        "lm.json",
        "glassbox.json",
        "samples.jsonl",
        "explanation.csv",
        "explanation.json",
        "report.json",
        "pr_curve.csv",
        "flip_curve.csv",
        "manifest.json",
    ] {
        let x = fs::read(dir.path().join("a").join(f)).unwrap();
        let y = fs::read(dir.path().join("b").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn mismatched_corpus_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "a", 0);
    let b = config(dir.path(), "b", 7);
    pipeline(&a, &[]);
    ok(&b, &["train-glassbox"]);
    let other = dir.path().join("b/glassbox.json");
    let out = run(&a, &["evaluate", "--glassbox", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("corpus_hash_mismatch: "));
    ok(
        &a,
        &["evaluate", "--glassbox", other.to_str().unwrap(), "--force"],
    );
}

#[test]
fn explain_can_refit_existing_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    pipeline(&cfg, &[]);
    let first = fs::read(dir.path().join("a/explanation.csv")).unwrap();
    let samples = dir.path().join("a/samples.jsonl");
    let summary = ok(&cfg, &["explain", "--samples", samples.to_str().unwrap()]);
    assert!(!summary.contains("samples.jsonl"));
    assert_eq!(
        fs::read(dir.path().join("a/explanation.csv")).unwrap(),
        first
    );
}

#[test]
fn dump_lists_top_words_and_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    pipeline(&cfg, &[]);
    let text = ok(&cfg, &["dump-samples"]);
    let lines: Vec<&str> = text.lines().collect();
    let headers: Vec<usize> = (0..lines.len())
        .filter(|&i| lines[i].starts_with("== "))
        .collect();
    assert_eq!(headers.len(), 3);
    for &h in &headers {
        let words = lines[h + 1].strip_prefix("top words: ").unwrap();
        assert_eq!(words.split(", ").count(), 20);
        assert!(lines[h + 2].starts_with("  [") && lines[h + 3].starts_with("  ["));
    }
}

#[test]
fn sweep_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    ok(&cfg, &["train-lm"]);
    ok(&cfg, &["train-glassbox"]);
    let summary = ok(&cfg, &["sweep", "--eval.sweep_sizes=[5,10]"]);
    assert!(summary.contains("texts per class 5") && summary.contains("texts per class 10"));
    let csv = fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().next().unwrap(), "size,mean_rho,mean_p_value");
}

/// Uniform model over three planted words plus EOS.
fn mock_bridge() -> String {
    const WORDS: [&str; 3] = ["key0x0", "key1x0", "key2x0"];
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { break };
            stream.set_nodelay(true).unwrap();
            let mut w = stream.try_clone().unwrap();
            for line in BufReader::new(stream).lines() {
                let Ok(line) = line else { break };
                let req: Value = serde_json::from_str(&line).unwrap();
                let id = req["id"].clone();
                let payload = match req["op"].as_str().unwrap() {
                    "meta" => {
                        json!({"protocol_version": 1, "vocab_size": 4, "eos_id": 3, "model_name": "mock"})
                    }
                    "next_token_logprobs" => json!({"logprobs": vec![0.25f64.ln(); 4]}),
                    "detokenize" => {
                        let ids: Vec<usize> =
                            serde_json::from_value(req["payload"]["ids"].clone()).unwrap();
                        json!({"text": ids.iter().map(|&i| WORDS[i]).collect::<Vec<_>>().join(" ")})
                    }
                    _ => json!({}),
                };
                if writeln!(w, "{}", json!({"id": id, "ok": true, "payload": payload})).is_err() {
                    break;
                }
            }
        }
    });
    addr
}

#[test]
fn bridge_endpoint_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", 0);
    ok(&cfg, &["train-glassbox"]);
    let out = bin()
        .env("COOP_EXPLAIN_BRIDGE", mock_bridge())
        .arg("-c")
        .arg(&cfg)
        .args([
            "generate",
            "--explainer.texts_per_class=3",
            "--mcts.max_length=4",
            "--mcts.rollout_max_tokens=4",
        ])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("bridge (mock)"), "{summary}");
    let samples = fs::read_to_string(dir.path().join("a/samples.jsonl")).unwrap();
    assert_eq!(samples.lines().count(), 9);
    for line in samples.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let class = v["class"].as_str().unwrap();
        let keyword = format!("key{}x0", &class[1..]);
        assert!(v["text"].as_str().unwrap().contains(&keyword), "{line}");
    }
}
