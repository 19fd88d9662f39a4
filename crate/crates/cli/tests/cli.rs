//! End-to-end tests of the `segvote` binary: exit codes, the
//! synth → train → eval → predict pipeline, and the ablation reports.

use std::path::Path;
use std::process::{Command, Output};

fn segvote(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segvote"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn help_exits_zero_and_lists_schemes() {
    let dir = tempfile::tempdir().unwrap();
    let out = segvote(dir.path(), &["--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for sub in ["synth", "train", "eval", "predict", "ablate", "report"] {
        assert!(text.contains(sub), "--help missing subcommand {sub}");
    }
    assert!(text.contains("v5") && text.contains("cen90"), "--help missing scheme list");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = segvote(dir.path(), &["frobnicate"]);
    assert_eq!(code(&out), 1);

    // unknown scheme is a usage error and names the valid schemes
    let out = segvote(
        dir.path(),
        &["train", "--manifest", "m.jsonl", "--out", "m.ckpt", "--scheme", "v999"],
    );
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("v999") && err.contains("v5"), "got: {err}");

    // mesonet baseline rejects segmentation schemes
    let out = segvote(
        dir.path(),
        &["train", "--manifest", "m.jsonl", "--out", "m.ckpt", "--arch", "mesonet", "--scheme", "v5"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ori"));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // missing manifest
    let out = segvote(
        dir.path(),
        &["train", "--manifest", "missing.jsonl", "--out", "m.ckpt"],
    );
    assert_eq!(code(&out), 2);

    // malformed checkpoint
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint at all").unwrap();
    let out = segvote(
        dir.path(),
        &["eval", "--model", "bad.ckpt", "--manifest", "missing.jsonl"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("magic"), "got: {}", stderr(&out));
}

#[test]
fn pipeline_synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let out = segvote(
        dir.path(),
        &["synth", "--out", "data", "--count", "10", "--size", "64", "--seed", "3"],
    );
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));
    assert!(dir.path().join("data/manifest.jsonl").is_file());

    let out = segvote(
        dir.path(),
        &[
            "train", "--manifest", "data/manifest.jsonl", "--arch", "mesonet-seg",
            "--scheme", "v5", "--out", "model.ckpt", "--epochs", "1",
            "--batch-size", "8", "--seed", "1",
        ],
    );
    assert_eq!(code(&out), 0, "train failed: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("epoch   0"), "missing epoch line: {text}");
    assert!(dir.path().join("model.ckpt").is_file());
    assert!(dir.path().join("model.ckpt.log.json").is_file());

    let out = segvote(
        dir.path(),
        &[
            "eval", "--model", "model.ckpt", "--manifest", "data/manifest.jsonl",
            "--split", "val", "--scheme", "v5", "--roc-csv", "roc.csv",
            "--report", "report.json", "--threshold", "0.5",
        ],
    );
    assert_eq!(code(&out), 0, "eval failed: {}", stderr(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(report["optimal_cutoff"]["threshold"].is_number());
    assert!(report["confusion"]["tp"].is_number());
    let roc = std::fs::read_to_string(dir.path().join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,fpr,tpr"));

    // eval with the wrong scheme is a data error
    let out = segvote(
        dir.path(),
        &["eval", "--model", "model.ckpt", "--manifest", "data/manifest.jsonl", "--scheme", "ori"],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("v5"), "got: {}", stderr(&out));

    let out = segvote(
        dir.path(),
        &["predict", "--model", "model.ckpt", "--image", "data/real_00000.ppm"],
    );
    assert_eq!(code(&out), 0, "predict failed: {}", stderr(&out));
    let line = stdout(&out);
    assert!(line.trim() == "REAL" || line.trim() == "FAKE", "got: {line}");

    let out = segvote(
        dir.path(),
        &["predict", "--model", "model.ckpt", "--image", "data/fake_00000.ppm", "--json"],
    );
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["per_voter"].as_array().unwrap().len(), 5);
    let (real, fake) = (v["tally"]["real"].as_u64().unwrap(), v["tally"]["fake"].as_u64().unwrap());
    assert_eq!(real + fake, 5);

    // truncating the checkpoint is a data error
    let bytes = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    std::fs::write(dir.path().join("cut.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    let out = segvote(
        dir.path(),
        &["predict", "--model", "cut.ckpt", "--image", "data/real_00000.ppm"],
    );
    assert_eq!(code(&out), 2);
}

#[test]
fn ablate_and_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = segvote(
        dir.path(),
        &["synth", "--out", "data", "--count", "8", "--size", "64", "--seed", "5"],
    );
    assert_eq!(code(&out), 0, "synth failed: {}", stderr(&out));

    let out = segvote(
        dir.path(),
        &[
            "ablate", "--manifest", "data/manifest.jsonl", "--schemes", "ori,v5,nope",
            "--out", "reports", "--name", "runA", "--epochs", "1", "--batch-size", "8",
        ],
    );
    // per-scheme failures are recorded in the table, not fatal
    assert_eq!(code(&out), 0, "ablate failed: {}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("reports/runA.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scheme,accuracy_pct,auc,error");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("ori,") && lines[2].starts_with("v5,"));
    assert!(lines[3].starts_with("nope,,,"), "failure row missing: {}", lines[3]);
    let md = std::fs::read_to_string(dir.path().join("reports/runA.md")).unwrap();
    assert!(md.contains("| Method | Accuracy (%) | AUC |"));

    let out = segvote(dir.path(), &["report", "--in", "reports", "--format", "csv"]);
    assert_eq!(code(&out), 0, "report failed: {}", stderr(&out));
    let merged = stdout(&out);
    assert!(merged.starts_with("run,scheme,accuracy_pct,auc,error"));
    assert!(merged.contains("runA,ori,") && merged.contains("runA,v5,"));

    let out = segvote(dir.path(), &["report", "--in", "reports", "--format", "md"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("| runA | ori |"));

    // empty report directory is a data error
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let out = segvote(dir.path(), &["report", "--in", "empty"]);
    assert_eq!(code(&out), 2);

    // unknown format is a usage error
    let out = segvote(dir.path(), &["report", "--in", "reports", "--format", "toml"]);
    assert_eq!(code(&out), 1);
}
