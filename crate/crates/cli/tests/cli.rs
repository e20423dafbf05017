use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_refback");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn json_out(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const TINY: &[&str] = &[
    "--set",
    "train_size=64",
    "--set",
    "dev_size=16",
    "--set",
    "test_size=16",
    "--set",
    "d_model=16",
    "--set",
    "epochs=1",
    "--set",
    "batch_size=16",
];

fn tiny(cmd: &[&str]) -> Vec<String> {
    cmd.iter().chain(TINY).map(|s| s.to_string()).collect()
}

fn gen_and_train(dir: &Path) {
    let args = tiny(&["gen", "--config", "default", "--seed", "3"]);
    json_out(&run(dir, &args.iter().map(String::as_str).collect::<Vec<_>>()));
    let args = tiny(&["train", "--seed", "3"]);
    json_out(&run(dir, &args.iter().map(String::as_str).collect::<Vec<_>>()));
}

fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn gen_writes_three_splits_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = json_out(&run(tmp.path(), &strs(&tiny(&["gen", "--config", "default"]))));
    assert_eq!(out["sizes"]["train"], 64);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json", "run_config.json"] {
        assert!(tmp.path().join("data").join(f).exists(), "{f}");
    }
    let lines = fs::read_to_string(tmp.path().join("data/dev.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 16);
    let first = fs::read(tmp.path().join("data/train.jsonl")).unwrap();
    json_out(&run(tmp.path(), &strs(&tiny(&["gen", "--config", "default"]))));
    assert_eq!(first, fs::read(tmp.path().join("data/train.jsonl")).unwrap());
}

#[test]
fn train_then_eval_reports_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    gen_and_train(tmp.path());
    let runs = tmp.path().join("runs");
    for f in ["final.rbgt", "train_log.jsonl", "run_config.json", "run.conf", "metrics.json"] {
        assert!(runs.join(f).exists(), "{f}");
    }
    assert!(fs::read_dir(runs.join("checkpoints")).unwrap().count() >= 1);
    let out = json_out(&run(
        tmp.path(),
        &["eval", "--checkpoint", "runs/final.rbgt", "--split", "test"],
    ));
    let acc = out["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(out["run_config"]["seed"], 0);
    // the saved config reproduces the run
    let again = run(
        tmp.path(),
        &["train", "--config", "runs/run.conf", "--out", "rerun"],
    );
    json_out(&again);
    let metrics = |d: &str| -> Value {
        serde_json::from_str(&fs::read_to_string(tmp.path().join(d).join("metrics.json")).unwrap())
            .unwrap()
    };
    assert_eq!(metrics("runs")["test"], metrics("rerun")["test"]);
    assert_eq!(metrics("runs")["epoch_losses"], metrics("rerun")["epoch_losses"]);
}

#[test]
fn checkpoint_dir_follows_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    json_out(&run(tmp.path(), &strs(&tiny(&["gen"]))));
    let out = Command::new(BIN)
        .current_dir(tmp.path())
        .env("REFBACK_CHECKPOINT_DIR", "elsewhere")
        .args(strs(&tiny(&["train"])))
        .output()
        .unwrap();
    json_out(&out);
    assert!(fs::read_dir(tmp.path().join("elsewhere")).unwrap().count() >= 1);
    assert!(!tmp.path().join("runs/checkpoints").exists());
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.conf"), "epochs = 7\nd_model = 32\nseed = 4\n").unwrap();
    let out = json_out(&run(
        tmp.path(),
        &["gen", "--config", "c.conf", "--seed", "5", "--set", "train_size=8", "--set", "dev_size=2", "--set", "test_size=2"],
    ));
    let cfg = &out["run_config"];
    assert_eq!(cfg["seed"], 5);
    assert_eq!(cfg["hyper"]["epochs"], 7);
    assert_eq!(cfg["d_model"], 32);
}

#[test]
fn errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad_flag = run(tmp.path(), &["gen", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_flag.stderr).contains("Usage"));

    let unknown = run(tmp.path(), &["frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));

    let bad_key = run(tmp.path(), &["gen", "--set", "colour=blue"]);
    assert_eq!(bad_key.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&bad_key.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "invalid_config");

    let missing = run(tmp.path(), &["eval", "--checkpoint", "nope.rbgt"]);
    assert_eq!(missing.status.code(), Some(4));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");

    fs::write(tmp.path().join("junk.rbgt"), b"not a checkpoint").unwrap();
    let corrupt = run(tmp.path(), &["eval", "--checkpoint", "junk.rbgt"]);
    assert_eq!(corrupt.status.code(), Some(5));
}

#[test]
fn heuristics_report_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    json_out(&run(tmp.path(), &strs(&tiny(&["gen"]))));
    let out = json_out(&run(tmp.path(), &["heuristics", "--split", "test"]));
    assert_eq!(out["heuristics"]["oracle"]["accuracy"], 1.0);
    assert!(out["heuristics"]["max_class"]["accuracy"].as_f64().unwrap() > 0.3);
    let out = json_out(&run(
        tmp.path(),
        &["heuristics", "--calibrate", "--calibration-sequences", "50"],
    ));
    assert_eq!(out["calibration"][0]["rows"].as_array().unwrap().len(), 8);
}

#[test]
fn patch_and_viz_emit_reports_and_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    gen_and_train(tmp.path());
    for st in ["input_gate", "role_address", "output_gate"] {
        let out = json_out(&run(
            tmp.path(),
            &["patch", "--checkpoint", "runs/final.rbgt", "--subtask", st, "--heatmaps", "maps"],
        ));
        assert_eq!(out["report"]["subtask"], st);
    }
    let out = json_out(&run(
        tmp.path(),
        &[
            "patch", "--checkpoint", "runs/final.rbgt", "--corruption", "store_to_ignore",
            "--component", "key", "--positions", "stored", "--mode", "activation", "--records",
        ],
    ));
    assert!(out["pairs"].as_u64().unwrap() > 0);
    assert!(out["records"].is_array());

    let out = json_out(&run(
        tmp.path(),
        &["viz", "--checkpoint", "runs/final.rbgt", "--index", "1", "--out", "viz"],
    ));
    assert!(!out["files"].as_array().unwrap().is_empty());
    assert!(tmp.path().join("viz/attention_L1H0.csv").exists());
    assert!(tmp.path().join("viz/attention.svg").exists());

    json_out(&run(
        tmp.path(),
        &["viz", "--checkpoint", "runs/final.rbgt", "--tokens", "STORE", "--out", "one"],
    ));
    let csv = fs::read_to_string(tmp.path().join("one/attention_L0H0.csv")).unwrap();
    assert_eq!(csv.lines().nth(1).unwrap(), "0:STORE,1");
}

#[test]
fn sweep_emits_curves_and_figure() {
    let tmp = tempfile::tempdir().unwrap();
    json_out(&run(tmp.path(), &strs(&tiny(&["gen"]))));
    let args = tiny(&["sweep", "--n-seeds", "2", "--out", "sweep", "--set", "probe_pairs=10"]);
    let out = json_out(&run(tmp.path(), &strs(&args)));
    assert_eq!(out["aggregate"]["completed"], 2);
    for f in ["sweep.json", "seed_0.csv", "seed_1.csv", "fig4.svg"] {
        assert!(tmp.path().join("sweep").join(f).exists(), "{f}");
    }
}
