use std::path::Path;
use std::process::{Command, Output};

fn rft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rft")).args(args).arg("--out").arg(dir).env("RAYON_NUM_THREADS", "1").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: [&str; 4] = ["--set", "data.generator.n=10", "--set", "data.heldout_n=4"];

#[test]
fn gen_data_writes_both_splits_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let out = rft(dir.path(), &[&["gen-data"][..], &TINY].concat());
    assert!(out.status.success(), "{}", stderr(&out));
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!(lines("train.jsonl"), 30);
    assert_eq!(lines("heldout.jsonl"), 12);
    for f in ["train.jsonl.meta.json", "heldout.jsonl.meta.json", "config.resolved.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("train.jsonl.meta.json")).unwrap()).unwrap();
    assert!(meta["config_hash"].as_str().is_some_and(|h| h.len() == 64), "{meta}");
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(rft(d.path(), &[&["gen-data", "--seed", "5"][..], &TINY].concat()).status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("train.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn eval_on_an_empty_split_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let quick = [&TINY[..], &["--set", "sft.steps=1", "--set", "sft.batch_size=2"]].concat();
    assert!(rft(dir.path(), &[&["gen-data"][..], &quick].concat()).status.success());
    let trained = rft(dir.path(), &[&["train-sft"][..], &quick].concat());
    assert!(trained.status.success(), "{}", stderr(&trained));
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let out = rft(dir.path(), &[&["eval", "--checkpoint", "sft", "--data", empty.to_str().unwrap()][..], &quick].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("empty dataset"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(rft(dir.path(), &[&["gen-data"][..], &TINY].concat()).status.success());
    let out = rft(dir.path(), &[&["eval", "--checkpoint", "nope"][..], &TINY].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = rft(dir.path(), &["gen-data", "--set", "rft.no_such_key=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("rft.no_such_key"), "{}", stderr(&out));
    let out = rft(dir.path(), &["gen-data", "--set", "rft.group_size=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("group_size"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(rft(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(rft(dir.path(), &["eval", "--bogus"]).status.code(), Some(2));
}
