//! Black-box tests of the binary: exit codes, determinism, usage errors.

use std::path::Path;
use std::process::Command;

fn sonoqa() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sonoqa"))
}

fn sha256_like(path: &Path) -> u64 {
    // cheap content fingerprint for byte-identity checks
    let bytes = std::fs::read(path).unwrap();
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[test]
fn missing_required_flag_is_usage_error() {
    let out = sonoqa().args(["generate", "--seed", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = sonoqa().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_key_is_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"count": 5, "no_such_option": true}"#).unwrap();
    let out = sonoqa()
        .args(["generate", "--out"])
        .arg(dir.path().join("ds"))
        .args(["--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("ds").exists(), "rejected run must not write output");
}

#[test]
fn generate_is_deterministic_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let run = || {
        let out = sonoqa()
            .args(["generate", "--seed", "7", "--count", "5", "--sections", "head", "--out"])
            .arg(&ds)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run();
    let manifest_a = sha256_like(&ds.join("manifest.json"));
    let image_a = sha256_like(&ds.join("images/head_0002.png"));
    run(); // overwrite with identical content
    assert_eq!(manifest_a, sha256_like(&ds.join("manifest.json")));
    assert_eq!(image_a, sha256_like(&ds.join("images/head_0002.png")));
}

#[test]
fn corrupt_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    // a checkpoint is required first; craft a corrupt one to hit data error
    let ckpt = dir.path().join("ckpt.json");
    std::fs::write(&ckpt, "{}").unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, "junk").unwrap();
    let out = sonoqa()
        .args(["assess", "--section", "head", "--checkpoint"])
        .arg(&ckpt)
        .args(["--image"])
        .arg(&img)
        .args(["--out"])
        .arg(dir.path().join("report"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_on_missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sonoqa()
        .args(["eval", "--checkpoint"])
        .arg(dir.path().join("nope.json"))
        .args(["--data"])
        .arg(dir.path().join("nowhere"))
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes_within_its_budget() {
    let started = std::time::Instant::now();
    let out = sonoqa().args(["selfcheck", "--seed", "42"]).output().unwrap();
    let seconds = started.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(seconds <= 300.0, "selfcheck took {seconds:.0}s");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
}
