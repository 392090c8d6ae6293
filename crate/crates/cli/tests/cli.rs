use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

fn scenario(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenario"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario_stdin(dir: &Path, args: &[&str], input: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_scenario"))
        .current_dir(dir)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("binary runs");
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn fails_with(out: &Output, code: i32) -> Value {
    assert_eq!(out.status.code(), Some(code), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    assert_eq!(err["error"]["exit_code"], code);
    err
}

fn synth_small(dir: &Path, out: &str) {
    ok(&scenario(
        dir,
        &[
            "synth", "--synthetic", "--disjoint", "--synthetic-scenarios", "80", "--train", "12", "--dev", "4",
            "--test", "4", "--seed", "3", "--out", out,
        ],
    ));
}

const TRAIN_SMALL: &[&str] = &[
    "train", "--data", "ds", "--head", "comp", "--hidden", "8", "--dim", "8", "--epochs", "1", "--batch-size", "4",
    "--deterministic",
];

fn train_small(dir: &Path, out: &str, extra: &[&str]) -> Value {
    let mut args = TRAIN_SMALL.to_vec();
    args.extend(["--out", out]);
    args.extend(extra);
    ok(&scenario(dir, &args))
}

fn read_log(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn synth_writes_manifest_and_replays_byte_identically() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ds/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["config"]["seed"], 3);
    assert!(manifest["outputs"].as_array().unwrap().len() >= 5);

    ok(&scenario(tmp.path(), &["synth", "--config", "ds/run_manifest.json", "--out", "again"]));
    for file in ["manifest.json", "train.jsonl", "dev.jsonl", "test.jsonl", "vocab.txt", "corpus.jsonl"] {
        let a = fs::read(tmp.path().join("ds").join(file)).unwrap();
        let b = fs::read(tmp.path().join("again").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs on replay");
    }
}

#[test]
fn missing_corpus_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let err = fails_with(&scenario(tmp.path(), &["synth", "--corpus", "absent.jsonl", "--out", "ds"]), 2);
    assert_eq!(err["error"]["kind"], "config");
}

#[test]
fn malformed_corpus_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.jsonl"), "{not json\n").unwrap();
    let err = fails_with(&scenario(tmp.path(), &["synth", "--corpus", "bad.jsonl", "--out", "ds"]), 3);
    assert_eq!(err["error"]["kind"], "data");
}

#[test]
fn unknown_flag_and_unknown_config_key_exit_2() {
    let tmp = TempDir::new().unwrap();
    fails_with(&scenario(tmp.path(), &["synth", "--no-such-flag"]), 2);
    fs::write(tmp.path().join("cfg.toml"), "typo_option = 1\n").unwrap();
    fails_with(&scenario(tmp.path(), &["synth", "--config", "cfg.toml", "--synthetic", "--out", "x"]), 2);
}

#[test]
fn bad_head_name_exits_2() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    let err = fails_with(&scenario(tmp.path(), &["train", "--data", "ds", "--out", "run", "--head", "bogus"]), 2);
    assert!(err["error"]["message"].as_str().unwrap().contains("bogus"));
}

#[test]
fn flags_override_config_file() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    fs::write(
        tmp.path().join("train.toml"),
        "data = \"ds\"\nout = \"run\"\nhead = \"comp-ins\"\nepochs = 1\nhidden = 8\ndim = 8\nbatch_size = 8\n",
    )
    .unwrap();
    ok(&scenario(tmp.path(), &["train", "--config", "train.toml", "--head", "comp"]));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("run/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["head"], "comp");
    assert_eq!(manifest["config"]["batch_size"], 8);
    assert_eq!(manifest["config"]["learning_rate"], 1e-4);
}

#[test]
fn deterministic_training_replays_identically() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    train_small(tmp.path(), "a", &[]);
    ok(&scenario(tmp.path(), &["train", "--config", "a/run_manifest.json", "--out", "b"]));
    for file in ["model.best.json", "model.last.json", "train_log.jsonl"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(file)).unwrap(),
            fs::read(tmp.path().join("b").join(file)).unwrap(),
            "{file} differs on replay"
        );
    }
}

#[test]
fn resume_reproduces_dev_f1() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    let first = train_small(tmp.path(), "a", &[]);
    let best = first["best_dev_f1"].as_f64().unwrap();
    train_small(tmp.path(), "b", &["--resume", "a/model.best.json"]);
    let log = read_log(&tmp.path().join("b/train_log.jsonl"));
    let start = log
        .iter()
        .find(|e| e["epoch"] == 0 && e["split"] == "dev")
        .expect("initial dev entry");
    assert!((start["f1"].as_f64().unwrap() - best).abs() < 1e-6);
}

#[test]
fn eval_oracle_scores_one_and_trainable_heads_need_a_checkpoint() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    let report = ok(&scenario(tmp.path(), &["eval", "--data", "ds", "--head", "oracle", "--out", "ev"]));
    assert_eq!(report["macro_f1"], 1.0);
    assert!(tmp.path().join("ev/report.json").exists());
    assert!(tmp.path().join("ev/report.csv").exists());
    assert!(tmp.path().join("ev/run_manifest.json").exists());
    fails_with(&scenario(tmp.path(), &["eval", "--data", "ds", "--head", "comp-ins-rn", "--out", "ev2"]), 2);
}

#[test]
fn eval_with_checkpoint_and_construct() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    train_small(tmp.path(), "run", &[]);
    let report = ok(&scenario(
        tmp.path(),
        &["eval", "--data", "ds", "--split", "dev", "--head", "comp", "--checkpoint", "run/model.best.json", "--out", "ev"],
    ));
    assert_eq!(report["mixtures"], 4);

    let lines = scenario_stdin(
        tmp.path(),
        &["construct", "--checkpoint", "run/model.best.json", "--budget", "2"],
        "a storm hit\nlines fell\ncrews came\nfans cheered\n",
    );
    let res = ok(&lines);
    assert_eq!(res["predicted_ids"].as_array().unwrap().len(), 2);
    assert_eq!(res["predicted_order"][0], "q");
    assert_eq!(res["trace"].as_array().unwrap().len(), 2);

    fs::write(tmp.path().join("in.json"), r#"{"query": "a storm hit", "sentences": []}"#).unwrap();
    let empty = ok(&scenario(tmp.path(), &["construct", "--checkpoint", "run/model.best.json", "--input", "in.json"]));
    assert_eq!(empty["predicted_order"], serde_json::json!(["q"]));
    assert_eq!(empty["termination"], "pool-exhausted");

    let out = scenario(
        tmp.path(),
        &["construct", "--checkpoint", "run/model.best.json", "--input", "in.json", "--out", "res/out.json"],
    );
    assert!(out.status.success());
    assert!(tmp.path().join("res/run_manifest.json").exists());
}

#[test]
fn inspect_marks_gold_sentences() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    let out = scenario(tmp.path(), &["inspect", "--data", "ds", "--index", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("query"));
    assert!(text.contains("* gold #1"));
    fails_with(&scenario(tmp.path(), &["inspect", "--data", "ds", "--index", "999"]), 2);
}

#[test]
fn jobs_flag_is_accepted() {
    let tmp = TempDir::new().unwrap();
    synth_small(tmp.path(), "ds");
    ok(&scenario(tmp.path(), &["--jobs", "1", "eval", "--data", "ds", "--head", "unif", "--out", "ev"]));
    fails_with(&scenario(tmp.path(), &["--jobs", "0", "eval", "--data", "ds", "--head", "unif", "--out", "ev"]), 2);
}
