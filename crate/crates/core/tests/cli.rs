use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "seed = 2\n[hyper]\nepochs = 1\n[data.synth]\nnum_sequences = 4\nframes_per_sequence = 40\n";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_au-spread")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        ok(&["gen-data", "--out", name, "--seed", "4", "--sequences", "3", "--frames", "30"], tmp.path());
    }
    let a = dir_bytes(&tmp.path().join("a"));
    assert_eq!(a.len(), 5, "meta, labels and one file per sequence");
    assert_eq!(a, dir_bytes(&tmp.path().join("b")));
    ok(&["gen-data", "--out", "c", "--seed", "5", "--sequences", "3", "--frames", "30"], tmp.path());
    assert_ne!(a, dir_bytes(&tmp.path().join("c")));
}

#[test]
fn baseline_manifest_zeroes_every_semi_supervised_term() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    ok(&["train", "--config", "small.toml", "--ablate", "baseline", "--out-dir", "runs", "--name", "base"], tmp.path());
    let run_dir = tmp.path().join("runs/base");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    let hyper = &manifest["resolved_hyper"];
    for key in ["lambda1", "lambda2", "lambda3", "lambda4", "alpha"] {
        assert_eq!(hyper[key].as_f64(), Some(0.0), "{key}");
    }
    assert_eq!(manifest["config"]["ablation"], "baseline");
    assert!(run_dir.join("epoch_1.ckpt").exists());
    assert!(run_dir.join("report.json").exists());

    let summary: serde_json::Value = serde_json::from_str(&ok(&["eval", "--checkpoint", "runs/base/epoch_1.ckpt"], tmp.path())).unwrap();
    assert_eq!(summary["epoch"], 1);
    let f1 = summary["macro_f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

#[test]
fn metrics_log_has_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    ok(&["train", "--config", "small.toml", "--epochs", "2", "--out-dir", "runs", "--name", "m"], tmp.path());
    let metrics = fs::read_to_string(tmp.path().join("runs/m/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,key_pos,l_skd,l_tkd,l_bce,l_s,l_t,l_ssl,l_semi,w_ramp,l_total");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert_eq!(r[2], (i % 5).to_string(), "key position rotates with the batch counter");
    }
    let events = fs::read_to_string(tmp.path().join("runs/m/events.jsonl")).unwrap();
    assert_eq!(events.lines().filter(|l| l.contains("\"event\":\"epoch\"")).count(), 2);
}

#[test]
fn coverage_writes_one_row_per_budget() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["coverage", "--ratios", "0.05,0.1", "--modes", "strided,contiguous", "--out", "cov.csv"], tmp.path());
    let text = fs::read_to_string(tmp.path().join("cov.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("ratio,mode"));
}

#[test]
fn usage_and_config_errors_exit_distinctly() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--no-such-flag"], tmp.path()).status.code(), Some(2));
    assert_eq!(run(&["train", "--epochs", "0"], tmp.path()).status.code(), Some(3));
    fs::write(tmp.path().join("bad.toml"), "[hyper]\nlamda1 = 0.5\n").unwrap();
    assert_eq!(run(&["train", "--config", "bad.toml"], tmp.path()).status.code(), Some(3));
}
