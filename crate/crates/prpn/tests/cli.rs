use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn prpn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prpn"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(text.trim_end().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim_end()).unwrap()
}

fn random_text(alphabet: &[char], len: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
}

/// A small char-level setup over the alphabet {a, b, c, d}.
fn setup(epochs: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.txt"), random_text(&['a', 'b', 'c', 'd'], 2000, 1)).unwrap();
    fs::write(dir.path().join("valid.txt"), random_text(&['a', 'b', 'c', 'd'], 800, 2)).unwrap();
    let config = serde_json::json!({
        "model": {
            "mode": "char", "embedding_size": 8, "hidden_size": 16, "layers": 2, "look_back": 3,
            "temperature": 10.0, "memory_span": 6, "residual_blocks": 1,
            "dropout": {"embedding": 0.1, "inter_layer": 0.1, "recurrent": 0.1},
            "tie_embeddings": false
        },
        "trainer": {"seed": 3, "epochs": epochs, "batch_size": 4, "bptt": 20, "lr": 0.003, "beta1": 0.9, "weight_decay": 1e-6},
        "data": {"train": "train.txt", "valid": "valid.txt"}
    });
    fs::write(dir.path().join("c.json"), config.to_string()).unwrap();
    dir
}

#[test]
fn untrained_model_scores_two_bits_on_four_symbols() {
    let dir = setup(0);
    assert!(prpn(dir.path(), &["train", "--config", "c.json", "--out", "run"]).status.success());
    let out = prpn(dir.path(), &["eval-lm", "--checkpoint", "run/last.ckpt", "--data", "valid.txt"]);
    let bpc = stdout_json(&out)["bpc"].as_f64().unwrap();
    assert!((bpc - 2.0).abs() < 0.1, "{bpc}");
}

#[test]
fn override_sets_logged_learning_rate() {
    let dir = setup(1);
    let out = prpn(dir.path(), &["train", "--config", "c.json", "--out", "run", "--override", "trainer.lr=0.001"]);
    assert_eq!(stdout_json(&out)["lr"].as_f64(), Some(0.001));
    let log = fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["lr"].as_f64(), Some(0.001));
    assert_eq!(first["split"], "train");
}

#[test]
fn same_seed_gives_identical_logs() {
    let dir = setup(2);
    for run in ["a", "b"] {
        assert!(prpn(dir.path(), &["train", "--config", "c.json", "--out", run]).status.success());
    }
    let read = |r: &str| fs::read(dir.path().join(r).join("metrics.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert!(prpn(dir.path(), &["train", "--config", "c.json", "--out", "c", "--seed", "4"]).status.success());
    assert_ne!(read("a"), read("c"));
}

#[test]
fn resumed_run_reproduces_continuous_log() {
    let dir = setup(2);
    assert!(prpn(dir.path(), &["train", "--config", "c.json", "--out", "full"]).status.success());
    let half = prpn(dir.path(), &["train", "--config", "c.json", "--out", "split", "--override", "trainer.epochs=1"]);
    assert!(half.status.success());
    let rest = prpn(dir.path(), &["train", "--resume", "--out", "split", "--override", "trainer.epochs=2"]);
    assert!(rest.status.success(), "{}", String::from_utf8_lossy(&rest.stderr));
    let read = |r: &str| fs::read_to_string(dir.path().join(r).join("metrics.jsonl")).unwrap();
    assert_eq!(read("full"), read("split"));
}

#[test]
fn parse_and_inspect_cover_every_token() {
    let dir = setup(1);
    assert!(prpn(dir.path(), &["train", "--config", "c.json", "--out", "run"]).status.success());
    fs::write(dir.path().join("s.txt"), "abcd\nba\n\nc\n").unwrap();
    let out = prpn(dir.path(), &["parse", "--checkpoint", "run/last.ckpt", "--input", "s.txt"]);
    assert!(out.status.success());
    let lines: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[2], "c");
    assert_eq!(lines[1], "(b a)");
    let leaves: String = lines[0].chars().filter(|c| c.is_alphabetic()).collect();
    assert_eq!(leaves, "abcd");
    assert_eq!(lines[0].matches('(').count(), 3);

    let out = prpn(dir.path(), &["inspect-distances", "--checkpoint", "run/last.ckpt", "--input", "s.txt"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["sentence", "index", "token", "distance"]);
    assert_eq!(rows.len(), 1 + 4 + 2 + 1);
    for r in &rows[1..] {
        assert!(r[3].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn eval_parse_of_gold_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gold = "(S (NP (DT the) (NN cat)) (VP (VBD sat) (PP (IN on) (NP (DT a) (NN mat)))) (. .))\n\
                (S (NP (PRP it)) (VP (VBD ran)))\n";
    fs::write(dir.path().join("g.mrg"), gold).unwrap();
    let out = prpn(dir.path(), &["eval-parse", "--gold", "g.mrg", "--pred", "g.mrg", "--pred-format", "ptb"]);
    let r = stdout_json(&out);
    assert_eq!(r["sentences"], 2);
    assert_eq!(r["f1"].as_f64(), Some(1.0));
    for k in ["RANDOM", "LBRANCH", "RBRANCH", "UPPER_BOUND"] {
        assert!(r["baselines"][k]["sentence"]["f1"].is_number(), "{k}");
    }

    // unlabeled predictions as printed by `parse`
    fs::write(dir.path().join("p.txt"), "((the cat) (sat (on (a mat))))\n(it ran)\n").unwrap();
    let out = prpn(dir.path(), &["eval-parse", "--gold", "g.mrg", "--pred", "p.txt"]);
    let r = stdout_json(&out);
    assert_eq!(r["f1"].as_f64(), Some(1.0));
    assert_eq!(r["baselines"]["UPPER_BOUND"]["sentence"]["f1"].as_f64(), Some(1.0));
}

#[test]
fn eval_parse_rejects_misaligned_predictions() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("g.mrg"), "(S (A a) (B b) (C c))\n").unwrap();
    fs::write(dir.path().join("p.txt"), "(a b)\n").unwrap();
    let out = prpn(dir.path(), &["eval-parse", "--gold", "g.mrg", "--pred", "p.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(stderr_json(&out)["error"], "data");
}

#[test]
fn exit_codes_and_error_lines() {
    let dir = setup(1);
    let missing = prpn(dir.path(), &["train", "--config", "absent.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(stderr_json(&missing)["error"], "config");

    let unknown = prpn(dir.path(), &["train", "--config", "c.json", "--override", "trainer.speed=3"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr_json(&unknown)["message"].as_str().unwrap().contains("speed"));

    let bad_value = prpn(dir.path(), &["train", "--config", "c.json", "--override", "trainer.lr=-1"]);
    assert_eq!(bad_value.status.code(), Some(2));

    let runtime = prpn(dir.path(), &["eval-lm", "--checkpoint", "none.ckpt", "--data", "valid.txt"]);
    assert_eq!(runtime.status.code(), Some(1));
    assert_eq!(stderr_json(&runtime)["error"], "io");

    let usage = prpn(dir.path(), &["frobnicate"]);
    assert_eq!(usage.status.code(), Some(2));
    assert_eq!(stderr_json(&usage)["error"], "usage");

    fs::write(dir.path().join("empty.txt"), "").unwrap();
    let empty = prpn(dir.path(), &["train", "--config", "c.json", "--override", "data.train=\"empty.txt\""]);
    assert_eq!(empty.status.code(), Some(1));
    assert_eq!(stderr_json(&empty)["error"], "data");
}

#[test]
fn suite_reports_every_property_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = prpn(dir.path(), &["suite", "--seed", "7", "--trials", "500"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let reports: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(reports.len(), prpn_core::oracle::property_names().count());
    for r in &reports {
        assert_eq!(r["failures"], 0, "{r}");
    }
    let again = prpn(dir.path(), &["suite", "--seed", "7", "--trials", "500"]);
    assert_eq!(again.stdout, text.as_bytes());
}
