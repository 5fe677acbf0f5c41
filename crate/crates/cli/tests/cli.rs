//! Exit codes and stage wiring of the `auxscatter` binary.

use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_auxscatter"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--kind", "resnet"]).status.code(), Some(2));
    assert_eq!(run(&["--set", "train.no_such_key=1", "phantom"]).status.code(), Some(2));
    assert_eq!(run(&["--set", "noequals", "phantom"]).status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "phantom"]).status.code(), Some(2));
    assert_eq!(run(&["--config", "/nonexistent/run.toml", "phantom"]).status.code(), Some(2));
}

#[test]
fn help_and_version_exit_with_0() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["phantom", "simulate", "dataset", "train", "eval", "recon", "reproduce"] {
        assert!(text.contains(cmd), "help lacks {cmd}");
    }
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_upstream_artifacts_exit_with_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for stage in ["simulate", "dataset", "train", "eval"] {
        let o = run(&["--out", out, stage]);
        assert_eq!(o.status.code(), Some(1), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn phantom_stage_writes_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = run(&["--out", out, "--seed", "3", "phantom"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let raws = std::fs::read_dir(tmp.path().join("phantoms"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "raw"))
        .count();
    assert!(raws >= 3, "{raws} phantom volumes");
}
