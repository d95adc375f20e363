//! Process-level behavior of the `lobit` binary: exit codes and outputs.

use std::fs;
use std::process::Command;

fn lobit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lobit"))
}

const DATA: &str = "synthetic:classes=2,train=32,test=16,size=6,seed=1";

#[test]
fn exit_codes_distinguish_failure_classes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let code = |args: &[&str]| lobit().args(args).output().unwrap().status.code();

    assert_eq!(code(&["train", "--w-bits", "17", "--out", out.to_str().unwrap()]), Some(2));
    assert_eq!(code(&["train", "--set", "nonsense=1"]), Some(2));
    assert_eq!(code(&["train", "--config", "/nonexistent/config.txt"]), Some(3));
    assert_eq!(code(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", DATA]), Some(3));
    assert_eq!(code(&["frobnicate"]), Some(2));

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert_eq!(code(&["train", "--data", empty.to_str().unwrap(), "--out", out.to_str().unwrap()]), Some(3));

    // 6x6 maps cannot take a 7x7 pool: the model only fails once data fixes the shape
    let bad_model = lobit()
        .args(["train", "--data", DATA, "--epochs", "1", "--set", "model=conv:2:3,pool:7,fc"])
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(bad_model.status.code(), Some(2));
    let stderr = String::from_utf8(bad_model.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
}

#[test]
fn train_eval_histogram_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = lobit()
        .args(["train", "--data", DATA, "--epochs", "1", "--w-bits", "1", "--a-bits", "2", "--g-bits", "4", "--quantize-first", "--quantize-last"])
        .args(["--set", "model=conv:3:3,pool:2,fc", "--set", "batch_size=8"])
        .arg("--out")
        .arg(&out)
        .env("LOBIT_THREADS", "1")
        .status()
        .unwrap();
    assert!(status.success());
    for f in ["config.txt", "metrics.csv", "timing.csv", "best.ckpt", "last.ckpt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(out.join("config.txt")).unwrap().contains("quantize_last = true"));

    let eval = lobit()
        .args(["eval", "--data", DATA, "--checkpoint"])
        .arg(out.join("last.ckpt"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    assert!(String::from_utf8(eval.stdout).unwrap().starts_with("samples=16 "));

    let hist = dir.path().join("h.csv");
    let st = lobit()
        .args(["histogram", "--layer", "conv1", "--what", "weights", "--data", DATA, "--checkpoint"])
        .arg(out.join("last.ckpt"))
        .arg("--out")
        .arg(&hist)
        .status()
        .unwrap();
    assert!(st.success());
    let csv = fs::read_to_string(&hist).unwrap();
    assert_eq!(csv.lines().skip(1).filter(|l| !l.ends_with(",0")).count(), 2);

    let bad = lobit()
        .args(["histogram", "--layer", "conv7", "--what", "weights", "--data", DATA, "--checkpoint"])
        .arg(out.join("last.ckpt"))
        .arg("--out")
        .arg(&hist)
        .status()
        .unwrap();
    assert_eq!(bad.code(), Some(2));
}

#[test]
fn bench_reports_one_row_per_width_pair() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    let st = lobit()
        .args(["bench", "--sizes", "4x4x100", "--bits", "1,2", "--repeats", "1", "--out"])
        .arg(&path)
        .status()
        .unwrap();
    assert!(st.success());
    let csv = fs::read_to_string(&path).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(lobit().args(["bench", "--bits", "0"]).output().unwrap().status.code(), Some(2));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let st = lobit().args(["bench", "--sizes", "2x2x8"]).env("LOBIT_THREADS", "zero").output().unwrap().status;
    assert_eq!(st.code(), Some(2));
}
