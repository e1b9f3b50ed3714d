//! End-to-end tests of the `echo-rnn` binary: dataset generation
//! determinism, manifest consistency, config precedence, and the exit-code
//! contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echo-rnn"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("echo-cli-test-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn gen_tiny(data_dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "gen",
        "--task",
        "distractor",
        "--data-dir",
        data_dir.to_str().unwrap(),
        "--set",
        "n_train=24",
        "--set",
        "n_val=8",
        "--set",
        "n_test=8",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let a = tmp_dir("gen-a");
    let b = tmp_dir("gen-b");
    assert!(gen_tiny(&a, &[]).status.success());
    assert!(gen_tiny(&b, &[]).status.success());
    for name in ["train.txt", "val.txt", "test.txt", "manifest.json"] {
        let left = fs::read(a.join("distractor").join(name)).unwrap();
        let right = fs::read(b.join("distractor").join(name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical gen runs");
    }
}

#[test]
fn manifest_counts_match_file_lines() {
    let dir = tmp_dir("gen-counts");
    assert!(gen_tiny(&dir, &[]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("distractor/manifest.json")).unwrap())
            .unwrap();
    for (file, key) in [("train.txt", "train"), ("val.txt", "val"), ("test.txt", "test")] {
        let lines = fs::read_to_string(dir.join("distractor").join(file))
            .unwrap()
            .lines()
            .count();
        assert_eq!(
            manifest["counts"][key].as_u64().unwrap(),
            lines as u64,
            "manifest count for {key} disagrees with {file}"
        );
    }
}

#[test]
fn gen_refuses_to_overwrite_without_force() {
    let dir = tmp_dir("gen-force");
    assert!(gen_tiny(&dir, &[]).status.success());
    let second = gen_tiny(&dir, &[]);
    assert_eq!(second.status.code(), Some(2), "overwrite should be a data error");
    assert!(gen_tiny(&dir, &["--force"]).status.success());
}

#[test]
fn exit_codes_follow_the_contract() {
    // 0: clean success paths
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));

    // 1: usage errors (bad flags, bad config values)
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(1));
    let dir = tmp_dir("exit-usage");
    let out = gen_tiny(&dir, &["--set", "not_a_key=5"]);
    assert_eq!(out.status.code(), Some(1), "unknown config key should exit 1");
    let out = run(&["train", "--task", "nonsense"]);
    assert_eq!(out.status.code(), Some(1), "unknown task should exit 1");

    // 2: data errors (training without a generated dataset)
    let empty = tmp_dir("exit-data");
    let out = run(&[
        "train",
        "--task",
        "distractor",
        "--data-dir",
        empty.to_str().unwrap(),
        "--desk-scale",
    ]);
    assert_eq!(out.status.code(), Some(2), "missing dataset should exit 2");

    // 3: numeric failures (an impossible gradient tolerance)
    let out = run(&["verify-gradients", "--tolerance", "1e-30"]);
    assert_eq!(out.status.code(), Some(3), "failed verification should exit 3");
}

#[test]
fn verify_gradients_passes_at_default_tolerance() {
    let out = run(&["verify-gradients"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["baseline", "attentive", "hybrid-ocg", "echo"] {
        let line = text
            .lines()
            .find(|l| l.contains(name))
            .unwrap_or_else(|| panic!("no verify line for {name}"));
        assert!(line.contains("PASS"), "{line}");
    }
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tmp_dir("precedence");
    let cfg = dir.join("exp.conf");
    fs::write(
        &cfg,
        "schema_version=1\ntask=distractor\nn_train=40\nn_val=8\nn_test=8\n",
    )
    .unwrap();

    // file alone: n_train comes from the file
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--data-dir",
        dir.join("from-file").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("from-file/distractor/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["counts"]["train"].as_u64(), Some(40));

    // --set on top of the file wins
    let out = run(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "n_train=16",
        "--data-dir",
        dir.join("from-flag").to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.join("from-flag/distractor/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["counts"]["train"].as_u64(), Some(16));
}

#[test]
fn env_var_overrides_output_dir() {
    let dir = tmp_dir("env-out");
    assert!(gen_tiny(&dir, &[]).status.success());
    let flag_out = dir.join("flag-out");
    let env_out = dir.join("env-out");
    let out = bin()
        .args([
            "train",
            "--task",
            "distractor",
            "--desk-scale",
            "--model",
            "baseline",
            "--seeds",
            "0",
            "--data-dir",
            dir.to_str().unwrap(),
            "--out",
            flag_out.to_str().unwrap(),
            "--set",
            "n_train=24",
            "--set",
            "n_val=8",
            "--set",
            "n_test=8",
            "--set",
            "max_epochs=1",
            "--set",
            "patience=1",
            "--set",
            "hidden_size=8",
            "--set",
            "embed_dim=4",
        ])
        .env("ECHO_RNN_OUT", &env_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(
        env_out.join("distractor/baseline/seed0/result.json").exists(),
        "results should land under ECHO_RNN_OUT"
    );
    assert!(!flag_out.exists(), "--out must lose to ECHO_RNN_OUT");
}
