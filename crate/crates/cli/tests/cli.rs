use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn speft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_speft"))
        .args(args)
        .current_dir(dir)
        .env("SPEFT_THREADS", "1")
        .output()
        .expect("spawn speft")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("model.toml"),
        "architecture = \"mlp\"\nwidths = [4, 16, 2]\nactivation = \"tanh\"\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("data.toml"),
        "kind = \"teacher_student\"\nwidths = [4, 8, 2]\nteacher_seed = 1\nnoise = 0.0\nn = 128\nseed = 2\n",
    )
    .unwrap();
    let out = speft(dir.path(), &["init", "--config", "model.toml", "--out", "base.ckpt"]);
    assert_eq!(ok_json(out)["parameters"], 114);
    dir
}

#[test]
fn magnitude_scores_without_data_then_mask() {
    let dir = workspace();
    let p = dir.path();
    let s = ok_json(speft(p, &["salience", "--checkpoint", "base.ckpt", "--metric", "magnitude", "--out", "s.scores"]));
    assert_eq!(s["entries"], 96);
    let m = ok_json(speft(p, &["mask", "--scores", "s.scores", "--rho", "0.25", "--scope", "local", "--out", "m.mask"]));
    assert_eq!(m["nnz"], 16 + 8);
    assert_eq!(m["per_layer"][0]["count"], 16);
}

#[test]
fn data_aware_metric_without_data_exits_config_error() {
    let dir = workspace();
    let out = speft(dir.path(), &["salience", "--checkpoint", "base.ckpt", "--metric", "grasp", "--out", "s.scores"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("requires data"), "{}", stderr(&out));
    assert!(!dir.path().join("s.scores").exists());
}

#[test]
fn unknown_metric_lists_valid_names() {
    let dir = workspace();
    let out = speft(dir.path(), &["salience", "--checkpoint", "base.ckpt", "--metric", "hessian", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for name in ["magnitude", "gradient", "snip", "force", "taylor_fo", "synflow", "grasp", "fisher"] {
        assert!(err.contains(name), "missing {name} in {err}");
    }
}

#[test]
fn mask_budget_rounding_to_zero_is_rejected() {
    let dir = workspace();
    let p = dir.path();
    ok_json(speft(p, &["salience", "--checkpoint", "base.ckpt", "--metric", "gradient", "--data", "data.toml", "--batches", "2", "--out", "s.scores"]));
    let out = speft(p, &["mask", "--scores", "s.scores", "--rho", "0.001", "--out", "m.mask"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("budget rounds to zero"));
}

#[test]
fn eval_reports_loss_on_the_eval_split() {
    let dir = workspace();
    let v = ok_json(speft(dir.path(), &["eval", "--checkpoint", "base.ckpt", "--data", "data.toml"]));
    assert!(v["loss"].as_f64().unwrap().is_finite());
    assert!(v["examples"].as_u64().unwrap() > 0);
}

#[test]
fn overhead_matches_the_refresh_count() {
    let dir = workspace();
    let v = ok_json(speft(dir.path(), &["overhead", "--metric", "gradient", "--steps", "10000", "--interval", "1000", "--batches", "64"]));
    assert_eq!(v["refreshes"], 11);
    assert_eq!(v["estimation_steps"], 704);
    let v = ok_json(speft(dir.path(), &["overhead", "--metric", "magnitude", "--steps", "100", "--checkpoint", "base.ckpt", "--rho", "0.5"]));
    assert_eq!(v["estimation_fraction"], 0.0);
    assert_eq!(v["storage"]["nnz"], 48);
}

#[test]
fn report_on_missing_directory_names_it() {
    let dir = workspace();
    let out = speft(dir.path(), &["report", "no-such-run", "--out", "rep"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-such-run"));
}

#[test]
fn train_then_report_then_eval_adapter() {
    let dir = workspace();
    let p = dir.path();
    std::fs::write(
        p.join("exp.toml"),
        r#"
name = "cli"
seeds = 1
checkpoint = "base.ckpt"

[dataset]
kind = "teacher_student"
widths = [4, 8, 2]
teacher_seed = 1
noise = 0.0
n = 128
seed = 2

[train]
density = 0.25
steps = 20
batch_size = 8
interval = -1

[train.salience]
batches = 2
batch_size = 4

[matrix]
metric = ["gradient", "magnitude"]
"#,
    )
    .unwrap();
    let v = ok_json(speft(p, &["train", "exp.toml", "--out", "runs"]));
    assert_eq!(v["runs"], 2);
    let runs: Vec<_> = std::fs::read_dir(p.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|d| d.join("manifest.json").exists())
        .collect();
    assert_eq!(runs.len(), 2);
    for r in &runs {
        for f in ["log.jsonl", "final.ckpt", "delta.adapter", "final.mask"] {
            assert!(r.join(f).exists(), "{} missing {f}", r.display());
        }
    }

    let rep = ok_json(speft(p, &["report", "runs", "--out", "rep"]));
    assert_eq!(rep["rows"], 2);
    let csv = std::fs::read_to_string(p.join("rep/report.csv")).unwrap();
    assert!(csv.lines().count() >= 3);

    let adapter = runs[0].join("delta.adapter");
    let with = ok_json(speft(p, &["eval", "--checkpoint", "base.ckpt", "--data", "data.toml", "--adapter", adapter.to_str().unwrap()]));
    let merged = ok_json(speft(p, &["eval", "--checkpoint", runs[0].join("final.ckpt").to_str().unwrap(), "--data", "data.toml"]));
    let (a, b) = (with["loss"].as_f64().unwrap(), merged["loss"].as_f64().unwrap());
    assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
}
