mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pvse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvse")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.push((entry.display().to_string(), std::fs::read(&entry).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

#[test]
fn synth_then_validate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = pvse(&["synth", "--images", "8", "--seed", "1", "--data", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = pvse(&["validate", "--data", s(&data), "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["images"], 8);
}

#[test]
fn usage_errors_exit_one() {
    let out = pvse(&["retrieve", "--query-image", "img-0000", "--parts", "upper-body", "--data", "x", "--model", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--pos-tag"));
    assert_eq!(pvse(&["train", "--epochs", "many"]).status.code(), Some(1));
    assert_eq!(pvse(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(pvse(&["validate"]).status.code(), Some(1));
    assert_eq!(pvse(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = pvse(&["validate", "--data", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));

    let (data, model) = common::fixture(dir.path());
    let out = pvse(&["train", "--data", s(&data), "--model", s(&dir.path().join("m2")), "--scheme", "pvse8"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pvse(&["aam", "--data", s(&data), "--model", s(&model), "--image", "img-0000", "--tag", "nope"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown tag 'nope'"));
}

#[test]
fn model_dataset_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = common::fixture(dir.path());
    let other = dir.path().join("other");
    let mut spec = common::small_spec(3);
    spec.grid_rows = 2;
    spec.grid_cols = 2;
    pvse_core::dataset::generate_synthetic(&spec, &other).unwrap();
    let out = pvse(&["validate", "--data", s(&other), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
    let out = pvse(&["reorder", "--data", s(&other), "--model", s(&model), "--tag", "style-00"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_query_and_eval_without_touching_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = common::fixture(dir.path());
    let before = snapshot(&data);
    let model = dir.path().join("m");
    let (d, m) = (s(&data), s(&model));
    let out = pvse(&["train", "--data", d, "--model", m, "--epochs", "3", "--batch", "16", "--kl", "16", "--json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["epoch_loss"].as_array().unwrap().len(), 3);
    assert!(model.join("trace.csv").is_file());

    let out = pvse(&[
        "retrieve", "--data", d, "--model", m, "--query-image", "img-0001", "--pos-tag", "head-item-01", "--parts", "head", "--top", "4",
        "--json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["results"].as_array().unwrap().len(), 4);

    let csv = dir.path().join("tags.csv");
    let out = pvse(&[
        "eval-tags", "--data", d, "--model", m, "--tag", "head-item-00", "--m", "1,2", "--ratio", "1", "--repeats", "3", "--out",
        s(&csv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("model,P@1,P@2,N@1,N@2\nrandom,"));
    assert!(csv.with_extension("json").is_file());

    let out = pvse(&["eval-regions", "--data", d, "--model", m, "--m", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("head P@2"));

    let out = pvse(&["aam", "--data", d, "--model", m, "--image", "img-0000", "--tag", "shoes-item-00", "--json"]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), 4);

    assert_eq!(snapshot(&data), before);
}
