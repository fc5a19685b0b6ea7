//! End-to-end runs of the `pcpr` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn pcpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcpr"))
        .args(args)
        .env("PCPR_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_specs(n: u32) -> Value {
    Value::Array(
        (0..n)
            .map(|id| {
                json!({
                    "name": format!("dom{id}"),
                    "domain_id": id,
                    "seed": 40 + id,
                    "num_places": 6,
                    "points_per_cloud": 24,
                    "landmarks_per_place": 2 + id,
                })
            })
            .collect(),
    )
}

/// Generates small domains and returns their manifest paths.
fn gen(dir: &Path, n: u32) -> Vec<PathBuf> {
    let spec = dir.join("spec.json");
    fs::write(&spec, small_specs(n).to_string()).unwrap();
    let data = dir.join("data");
    let out = pcpr(&["gen-data", "--spec", arg(&spec), "--out", arg(&data)]);
    assert!(out.status.success(), "{}", stderr(&out));
    (0..n).map(|id| data.join(format!("dom{id}")).join("manifest.json")).collect()
}

fn write_config(dir: &Path, manifests: &[PathBuf], protocol: &str) -> PathBuf {
    let config = json!({
        "seed": 3,
        "protocol": protocol,
        "domains": { "manifests": manifests },
        "train": { "epochs": 2, "batch_anchors": 6, "memory_capacity": 8 },
        "encoder": { "hidden_dims": [8, 8], "descriptor_dim": 8 },
        "recall_n": [1, 2, 5],
    });
    let path = dir.join(format!("{protocol}.json"));
    fs::write(&path, config.to_string()).unwrap();
    path
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_defaults_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = pcpr(&["gen-data", "--out", arg(dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let manifests = tree(&a).into_iter().filter(|(p, _)| p.ends_with("manifest.json")).count();
    assert_eq!(manifests, 4);
    assert!(tree(&a) == tree(&b));
}

#[test]
fn invalid_specs_exit_with_the_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.json");
    fs::write(&spec, json!({ "name": "x", "num_places": 1 }).to_string()).unwrap();
    let out = pcpr(&["gen-data", "--spec", arg(&spec), "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("num_places"), "{}", stderr(&out));

    let config = tmp.path().join("config.json");
    fs::write(&config, json!({ "train": { "epochs": 2, "learning_rate": 0.1 } }).to_string()).unwrap();
    let out = pcpr(&["train", "--config", arg(&config), "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
}

#[test]
fn train_then_eval_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen(tmp.path(), 4);
    let config = write_config(tmp.path(), &manifests, "four-step");
    let run = tmp.path().join("run");
    let out = pcpr(&["train", "--config", arg(&config), "--out", arg(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("mR@1") && stdout.contains("F "), "{stdout}");

    let csv = fs::read_to_string(run.join("recall_matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,dom0,dom1,dom2,dom3");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].ends_with(",,,"));
    let log = fs::read_to_string(run.join("runlog.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count(), 8);
    for k in 1..=4 {
        assert!(run.join(format!("step_{k}")).join("params.bin").is_file());
    }

    let report = read_json(&run.join("report.json"));
    let keys: Vec<&String> = report["recall_at_n_curve"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["1", "2", "5"]);

    let evaluated = tmp.path().join("eval.json");
    let params = run.join("step_4").join("params.bin");
    let mut args = vec!["eval", "--checkpoint", arg(&params), "--recall-n", "1,2,5", "--out", arg(&evaluated)];
    for m in &manifests {
        args.extend(["--manifest", arg(m)]);
    }
    let out = pcpr(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(read_json(&evaluated), report);

    // A checkpoint whose shape disagrees with the config is an eval error.
    let other = tmp.path().join("other.json");
    fs::write(&other, json!({ "encoder": { "hidden_dims": [4], "descriptor_dim": 8 } }).to_string()).unwrap();
    let mut args = vec!["eval", "--checkpoint", arg(&params), "--config", arg(&other)];
    args.extend(["--manifest", arg(&manifests[0])]);
    let out = pcpr(&args);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));

    // Resuming from step 2 rebuilds the same later rows.
    let resumed = tmp.path().join("resumed");
    let step2 = run.join("step_2");
    let out = pcpr(&["train", "--config", arg(&config), "--out", arg(&resumed), "--resume-from", arg(&step2)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let again = fs::read_to_string(resumed.join("recall_matrix.csv")).unwrap();
    assert_eq!(again, csv);
}

#[test]
fn eval_reports_exactly_the_requested_cutoffs() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen(tmp.path(), 2);
    let config = write_config(tmp.path(), &manifests, "four-step");
    let run = tmp.path().join("run");
    assert!(pcpr(&["train", "--config", arg(&config), "--out", arg(&run)]).status.success());
    let params = run.join("step_1").join("params.bin");
    let out = pcpr(&["eval", "--checkpoint", arg(&params), "--manifest", arg(&manifests[1]), "--recall-n", "3,7"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let keys: Vec<&String> = report["recall_at_n_curve"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["3", "7"]);
    assert!(report["forgetting"].is_null());

    let out = pcpr(&["eval", "--checkpoint", arg(&params), "--manifest", arg(&manifests[0]), "--recall-n", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn two_step_protocol_writes_two_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let manifests = gen(tmp.path(), 4);
    let config = write_config(tmp.path(), &manifests, "two-step");
    let run = tmp.path().join("run");
    let out = pcpr(&["train", "--config", arg(&config), "--out", arg(&run)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(run.join("recall_matrix.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "step,dom0,dom1+dom2+dom3");
}

#[test]
fn selfcheck_passes() {
    let out = pcpr(&["selfcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
