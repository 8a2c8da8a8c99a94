// SPDX-License-Identifier: Apache-2.0

//! Command-line exit codes and file round trips.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_realm-devsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn example(dir: &Path, name: &str) -> PathBuf {
    let o = bin(&["example", name]);
    assert_eq!(code(&o), 0);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, &o.stdout).unwrap();
    path
}

#[test]
fn exit_codes_follow_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let counter = example(dir.path(), "counter");
    let c = counter.to_str().unwrap();
    assert_eq!(code(&bin(&["run", c])), 0);
    assert_eq!(code(&bin(&["run", c, "--strategy", "inject_fake:50"])), 2);
    assert_eq!(
        code(&bin(&["run", c, "--mode", "br", "--strategy", "inject_fake:50"])),
        3
    );
    assert_eq!(code(&bin(&["run", c, "--strategy", "teleport"])), 1);
    assert_eq!(code(&bin(&["run", "/nonexistent.json"])), 1);
    assert_eq!(code(&bin(&["frobnicate"])), 1);
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"mode":"dmi","vms":[{"id":1,"ram":{"start":0,"count":4},"devices":[{"device":99,"gpas":[],"interrupts":[]}]}]}"#).unwrap();
    let o = bin(&["run", path.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("vms[0].devices[0].device"));
}

#[test]
fn trace_replays_and_metrics_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let kb = example(dir.path(), "keyboard");
    let (trace, metrics) = (dir.path().join("t.jsonl"), dir.path().join("m.json"));
    let o = bin(&[
        "run",
        kb.to_str().unwrap(),
        "--trace",
        trace.to_str().unwrap(),
        "--metrics",
        metrics.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(m["eois"], 100);
    assert_eq!(
        code(&bin(&["replay", kb.to_str().unwrap(), trace.to_str().unwrap()])),
        0
    );
    let o = bin(&["replay", kb.to_str().unwrap(), trace.to_str().unwrap(), "--seed", "99"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("diverged at step"));
}

#[test]
fn compare_and_attacks_report() {
    let dir = tempfile::tempdir().unwrap();
    let kb = example(dir.path(), "keyboard");
    let o = bin(&["compare", kb.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    let o = bin(&["attacks", "--mode", "dmi"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().filter(|l| l.contains("ViolationsDetected")).count(), 8);
}
