//! The `rejepa` binary against the library it wraps.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::tiny_run_config;
use rejepa::config::{METRICS_DIR_ENV, METRICS_FILE};
use rejepa::data::{load_archive, read_raw_image};
use rejepa::model::EncoderKind;
use rejepa::retrieval::{build_index, evaluate_model, load_index, query, Metric};
use rejepa::training::{load_checkpoint, FINAL_CHECKPOINT};

fn rejepa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rejepa"))
        .current_dir(dir)
        .env_remove(METRICS_DIR_ENV)
        .args(args)
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(stderr.lines().last().expect("error line")).expect("stderr is JSON")
}

/// Writes the tiny config, trains it and exports its synthetic archive.
fn trained(dir: &Path) {
    let cfg = tiny_run_config(Path::new("run"));
    std::fs::write(dir.join("run.toml"), cfg.to_toml_string()).unwrap();
    let out = rejepa(dir, &["train", "run.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = rejepa(dir, &["--quiet", "synth", "run.toml", "--out", "arch"]);
    assert!(out.status.success());
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let run = dir.path().join("run");
    assert!(run.join(FINAL_CHECKPOINT).exists());
    let metrics = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let state = load_checkpoint(&run.join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(metrics.lines().count() as u64, state.step);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "L_pred", "v", "c", "L_inv", "total"] {
        assert!(first.get(key).is_some(), "metrics line lacks {key}");
    }
}

#[test]
fn metrics_dir_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(Path::new("run"));
    std::fs::write(dir.path().join("run.toml"), cfg.to_toml_string()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rejepa"))
        .current_dir(dir.path())
        .env(METRICS_DIR_ENV, "elsewhere")
        .args(["--quiet", "train", "run.toml"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stdout.is_empty(), "--quiet printed {:?}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("elsewhere").join(METRICS_FILE).exists());
    assert!(!dir.path().join("run").join(METRICS_FILE).exists());
}

#[test]
fn query_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let d = dir.path();
    let out = rejepa(
        d,
        &["--quiet", "embed", "--checkpoint", "run/final.ckpt", "--archive", "arch/train", "--out", "train.index"],
    );
    assert!(out.status.success());
    let out = rejepa(
        d,
        &[
            "query",
            "--index",
            "train.index",
            "--checkpoint",
            "run/final.ckpt",
            "--image",
            "arch/holdout/000002.raw",
            "--k",
            "5",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let cli_ids: Vec<&str> = json["neighbors"]
        .as_array()
        .unwrap()
        .iter()
        .map(|n| n["id"].as_str().unwrap())
        .collect();

    let state = load_checkpoint(&d.join("run/final.ckpt")).unwrap();
    let (records, stats) = load_archive(&d.join("arch/train")).unwrap();
    let index = build_index(&state.model, &records, Metric::Euclidean).unwrap();
    assert_eq!(load_index(&d.join("train.index")).unwrap().matrix, index.matrix);
    let mut image = read_raw_image(&d.join("arch/holdout/000002.raw")).unwrap();
    stats.apply(&mut image).unwrap();
    let v = state.model.pooled_embedding(&image, EncoderKind::Target).unwrap();
    let lib = query(&index, v.view(), 5, None).unwrap();
    let lib_ids: Vec<&str> = lib.iter().map(|n| n.id.as_str()).collect();
    assert_eq!(cli_ids, lib_ids);
    let cli_d: Vec<f64> = json["neighbors"].as_array().unwrap().iter().map(|n| n["distance"].as_f64().unwrap()).collect();
    let lib_d: Vec<f64> = lib.iter().map(|n| n.distance).collect();
    assert_eq!(cli_d, lib_d);
}

#[test]
fn eval_matches_library_and_rejects_large_k() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let d = dir.path();
    let out = rejepa(d, &["eval", "--checkpoint", "run/final.ckpt", "--archive", "arch/holdout", "--k", "3"]);
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let state = load_checkpoint(&d.join("run/final.ckpt")).unwrap();
    let (records, _) = load_archive(&d.join("arch/holdout")).unwrap();
    let lib = evaluate_model(&state.model, &records, Metric::Euclidean, 3).unwrap();
    assert_eq!(json["mean_f1"].as_f64().unwrap(), lib.mean_f1);
    assert_eq!(json["per_query"].as_array().unwrap().len(), records.len());

    // 8 held-out images leave at most 7 neighbours per query
    let out = rejepa(d, &["eval", "--checkpoint", "run/final.ckpt", "--archive", "arch/holdout", "--k", "8"]);
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["fields"][0]["field"], "k");
    assert!(err["error"]["message"].as_str().unwrap().contains("archive size 8"));
}

#[test]
fn bad_config_lists_every_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "schema_version = 1\ncolour = 2\n[train]\nlr_peak = -1.0\nbatch_size = 0\n[retrieval]\nk = 0\n",
    )
    .unwrap();
    let err = error_json(&rejepa(dir.path(), &["train", "bad.toml"]));
    assert_eq!(err["error"]["kind"], "config");
    let fields: Vec<&str> = err["error"]["fields"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    for f in ["colour", "train.lr_peak", "train.batch_size", "retrieval.k"] {
        assert!(fields.contains(&f), "{f} missing from {fields:?}");
    }
}

#[test]
fn failures_are_json_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let err = error_json(&rejepa(dir.path(), &["eval", "--checkpoint", "missing.ckpt", "--archive", "nowhere"]));
    assert_eq!(err["error"]["kind"], "io");
    let err = error_json(&rejepa(dir.path(), &["frobnicate"]));
    assert_eq!(err["error"]["kind"], "usage");
}

#[test]
fn ablate_writes_one_row_per_setting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_run_config(Path::new("runs"));
    let base = cfg.to_toml_string().replace("schema_version = 1\n", "");
    let spec = format!("schema_version = 1\naxis = \"vicreg\"\nvalues = [\"on\", \"off\"]\ntrials = 2\n{base}");
    std::fs::write(dir.path().join("spec.toml"), spec).unwrap();
    let out = rejepa(dir.path(), &["--quiet", "ablate", "spec.toml", "--out", "table.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "setting,mean_f1,std,n_trials");
    assert_eq!(lines.len(), 3);
    let trials: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("runs/trials.json")).unwrap()).unwrap();
    assert_eq!(trials.as_array().unwrap().len(), 4);
    assert!(dir.path().join("runs/vicreg-off/trial-1").join(FINAL_CHECKPOINT).exists());
}
