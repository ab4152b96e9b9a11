//! The `ranf` binary end to end: exit codes, outputs and the stage-by-stage
//! pipeline on a tiny synthetic bundle.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "n = 3\nk = 2\n\n[split]\nexclude = []\nsizes = { pretrain = 6, validation = 1, eval = 2 }\n\n\
[model]\nchannels = 16\nblocks = 1\nlstm_units = 8\ntac_hidden = 8\nrff_features = 8\nhrir_length = 128\n\n\
[train]\npretrain_epochs = 2\nadapt_epochs = 5\nbatch_size = 8\n";

fn ranf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranf"))
        .args(args)
        .env_remove("RANF_DATA_DIR")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 8 subjects on the 42-point grid, L = 128.
fn tiny_bundle(root: &Path) -> PathBuf {
    let dir = root.join("bundle");
    let out = ranf(&["synth-gen", "--out", s(&dir), "--subjects", "8", "--grid", "icosphere:1", "--hrir-length", "128"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    dir
}

fn tiny_config(root: &Path, extra: &str) -> PathBuf {
    let p = root.join("tiny.toml");
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generated_bundle_validates() {
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let out = ranf(&["validate", "--bundle", s(&b)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("8 subjects, 42 directions"));
    // the data directory can come from the environment
    let env = Command::new(env!("CARGO_BIN_EXE_ranf")).arg("validate").env("RANF_DATA_DIR", &b).output().unwrap();
    assert_eq!(code(&env), 0);
}

#[test]
fn corrupted_bundles_exit_two_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let manifest = b.join("manifest.json");
    let original = std::fs::read_to_string(&manifest).unwrap();

    let mut m: Value = serde_json::from_str(&original).unwrap();
    m["grid"][0][1] = Value::from(3.0);
    std::fs::write(&manifest, m.to_string()).unwrap();
    let out = ranf(&["validate", "--bundle", s(&b)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("elevation in [-pi/2, pi/2]"), "{}", stderr(&out));

    std::fs::write(&manifest, &original).unwrap();
    let payload = b.join("P0003.f32");
    let bytes = std::fs::read(&payload).unwrap();
    std::fs::write(&payload, &bytes[..bytes.len() - 4]).unwrap();
    let out = ranf(&["validate", "--bundle", s(&b)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("P0003"), "{}", stderr(&out));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&ranf(&["no-such-command"])), 1);
    assert_eq!(code(&ranf(&["subset"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "unknown_key = 1\n").unwrap();
    let out = ranf(&["experiment", "--bundle", s(&b), "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn subset_and_retrieve() {
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let sub = dir.path().join("subset.json");
    let out = ranf(&["subset", "--bundle", s(&b), "--n", "5", "--out", s(&sub)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(&sub);
    assert_eq!(v["indices"].as_array().unwrap().len(), 5);

    let r = dir.path().join("retrieval.json");
    let out = ranf(&["retrieve", "--bundle", s(&b), "--target", "P0002", "--n", "3", "--k", "3", "--out", s(&r)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(&r);
    let subjects = v["subjects"].as_array().unwrap();
    assert_eq!(subjects.len(), 3);
    assert!(!subjects.iter().any(|x| x == "P0002"));

    let out = ranf(&["retrieve", "--bundle", s(&b), "--target", "P0099", "--n", "3"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn experiment_writes_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let cfg = tiny_config(dir.path(), "");
    let out_dir = dir.path().join("exp");
    let out = ranf(&["--threads", "2", "experiment", "--bundle", s(&b), "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["report.json", "report.csv", "model.ranf", "model.ranf.json", "train_log.jsonl", "run.json"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let report = read_json(&out_dir.join("report.json"));
    let methods = report["methods"].as_object().unwrap();
    for m in ["ranf", "nearest_neighbor", "selection_itd", "selection_lsd"] {
        assert!(methods.contains_key(m), "{m}");
    }
    let log = std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let table = dir.path().join("table.csv");
    let out = ranf(&["report", s(&out_dir.join("report.json")), "--out", s(&table)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("method,n3_itd_us,n3_ild_db,n3_lsd_db"), "{text}");
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn stage_by_stage_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let b = tiny_bundle(root);
    let cfg = tiny_config(root, "");
    let pre = root.join("pre");
    let out = ranf(&["pretrain", "--bundle", s(&b), "--config", s(&cfg), "--out", s(&pre)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ck = pre.join("pretrained.ranf");
    let sidecar = read_json(&PathBuf::from(format!("{}.json", ck.display())));
    let measured: Vec<String> = sidecar["measured"].as_array().unwrap().iter().map(|v| v.to_string()).collect();
    assert_eq!(measured.len(), 3);

    // resuming a finished run adds no epochs
    let out = ranf(&["pretrain", "--bundle", s(&b), "--config", s(&cfg), "--out", s(&pre), "--resume"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(pre.join("train_log.jsonl")).unwrap().lines().count(), 2);

    let adapted = root.join("adapted.ranf");
    let out = ranf(&["adapt", "--bundle", s(&b), "--checkpoint", s(&ck), "--target", "P0008", "--epochs", "3", "--out", s(&adapted)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let pred = root.join("pred");
    let out = ranf(&["upsample", "--bundle", s(&b), "--checkpoint", s(&adapted), "--target", "P0008", "--out", s(&pred)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(code(&ranf(&["validate", "--bundle", s(&pred)])), 0);

    let eval = root.join("eval.json");
    let out = ranf(&[
        "evaluate",
        "--pred",
        s(&pred),
        "--truth",
        s(&b),
        "--subject",
        "P0008",
        "--measured",
        &measured.join(","),
        "--out",
        s(&eval),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v = read_json(&eval);
    assert_eq!(v["n"], 3);
    assert!(v["report"]["mean"]["lsd_db"].as_f64().unwrap() > 0.0);

    let out = ranf(&["report", s(&eval)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ranf,"));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let b = tiny_bundle(dir.path());
    let cfg = dir.path().join("diverge.toml");
    std::fs::write(&cfg, TINY.replace("[train]\n", "[train]\nlr = 1e30\n")).unwrap();
    let out = ranf(&["experiment", "--bundle", s(&b), "--config", s(&cfg), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}
