//! The `mmvl` binary: exit codes, JSON outputs and schema conformance.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;
use mmvl::checkpoint;
use mmvl::config::TrainConfig;
use mmvl::model::Model;
use serde_json::Value;

fn mmvl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvl")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), stderr(out))
    })
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, cfg: &TrainConfig) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn budget_reproduces_table_rows() {
    let out = mmvl(&["budget", "--dims", "672x672", "--strategy", "uniform4"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_matches_schema("budget_report.schema.json", &v);
    assert_eq!(v["views"], 5);

    let v = json(&mmvl(&["budget", "--frames", "30", "--window", "2"]));
    assert_matches_schema("budget_report.schema.json", &v);
    assert_eq!((v["naive_position_ids"].as_u64(), v["shared_position_ids"].as_u64()), (Some(4320), Some(30)));

    let v = json(&mmvl(&["budget", "--dims", "336x336", "--strategy", "resize"]));
    assert_eq!((v["views"].as_u64(), v["raw_tokens"].as_u64()), (Some(1), Some(576)));

    let v = json(&mmvl(&["budget", "--dims", "500x2000", "--window", "3", "--text-tokens", "5"]));
    assert_matches_schema("budget_report.schema.json", &v);
    assert_eq!(v["shared_position_ids"].as_u64().unwrap(), v["views"].as_u64().unwrap() + 5);
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        &["budget", "--dims", "672x672", "--strategy", "mosaic"][..],
        &["budget"],
        &["budget", "--dims", "12by12"],
        &["budget", "--dims", "10x10", "--frames", "3"],
        &["frobnicate"],
        &[],
    ] {
        let out = mmvl(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
        assert!(out.stdout.is_empty());
    }
    assert_eq!(mmvl(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let out = mmvl(&["budget", "--dims", "0x10"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mmvl(&["budget", "--dims", "10x10", "--tile", "100"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("tile"));
}

#[test]
fn bad_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("seed = 1\nstepz = 4\n[[phases]]\nphase = \"sft\"\nsteps = 1\n", "`stepz`"),
        ("[[phases]]\nphase = \"sft\"\nsteps = 1\n[[phases]]\nphase = \"alignment\"\nsteps = 1\n", "`phases`"),
        ("[[phases]]\nphase = \"alignment\"\nsteps = \"many\"\n", "`steps`"),
        ("[[phases]]\nphase = \"multitask\"\nsteps = 1\ntrainable_groups = [\"projector\"]\n", "`phases[0].trainable_groups`"),
    ];
    for (text, field) in cases {
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, text).unwrap();
        let out = mmvl(&["train", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2));
        assert!(stderr(&out).contains(field), "{field}: {}", stderr(&out));
    }
    let out = mmvl(&["train", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_one_checkpoint_per_phase_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(&dir.path().join("a"));
    let config = write_config(dir.path(), &cfg);
    let out = mmvl(&["train", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = json(&out);
    assert_matches_schema("train_summary.schema.json", &summary);
    let phases = summary["phases"].as_array().unwrap();
    assert_eq!(phases.len(), 3);
    for p in phases {
        assert!(Path::new(p["checkpoint"].as_str().unwrap()).is_file());
        let log = std::fs::read_to_string(p["log"].as_str().unwrap()).unwrap();
        let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4, "three steps and a report");
        for l in &lines {
            assert_matches_schema("train_log_record.schema.json", l);
        }
    }
    let on_disk: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk["final_checkpoint"], summary["final_checkpoint"]);

    let out = mmvl(&["train", "--config", &config, "--out-dir", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let first = std::fs::read(dir.path().join("a/2_sft.mmda")).unwrap();
    let second = std::fs::read(dir.path().join("b/2_sft.mmda")).unwrap();
    assert!(first == second, "final checkpoints differ");

    // Resume: drop the last phase and rerun; earlier phases are reused.
    std::fs::remove_file(dir.path().join("a/2_sft.mmda")).unwrap();
    let mut resume = cfg.clone();
    resume.resume = true;
    let config = write_config(dir.path(), &resume);
    let out = mmvl(&["train", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s = json(&out);
    let resumed: Vec<bool> = s["phases"].as_array().unwrap().iter().map(|p| p["resumed"].as_bool().unwrap()).collect();
    assert_eq!(resumed, [true, true, false]);
    assert!(std::fs::read(dir.path().join("a/2_sft.mmda")).unwrap() == first);
}

/// Default encoder (576 tokens per view), small decoder so eval stays quick.
fn eval_setup(dir: &Path) -> (String, String) {
    let mut cfg = TrainConfig::default();
    cfg.model.decoder = tiny_model_config().decoder;
    cfg.eval_samples = 2;
    cfg.timing_frames = 1;
    cfg.out_dir = dir.to_path_buf();
    let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
    let ckpt = dir.join("fresh.mmda");
    checkpoint::save(&model.params, &ckpt).unwrap();
    (write_config(dir, &cfg), ckpt.to_str().unwrap().to_string())
}

#[test]
fn eval_reports_each_window() {
    let dir = tempfile::tempdir().unwrap();
    let (config, ckpt) = eval_setup(dir.path());
    let run = || {
        let out = mmvl(&["eval", "--checkpoint", &ckpt, "--config", &config]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        json(&out)
    };
    let a = run();
    assert_matches_schema("eval_report.schema.json", &a);
    let windows = a["windows"].as_array().unwrap();
    let tokens: Vec<u64> = windows.iter().map(|w| w["visual_tokens_per_view"].as_u64().unwrap()).collect();
    assert_eq!(tokens, [576, 64]);
    assert!(windows.iter().all(|w| w["forward_times_s"].as_array().unwrap().len() == 5));
    let b = run();
    for (x, y) in windows.iter().zip(b["windows"].as_array().unwrap()) {
        assert_eq!(x["accuracy"], y["accuracy"]);
        assert_eq!(x["correct"], y["correct"]);
    }
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (config, ckpt) = eval_setup(dir.path());

    let mut empty: TrainConfig = TrainConfig::load(&config).unwrap();
    empty.eval_samples = 0;
    let empty_cfg = dir.path().join("empty.toml");
    std::fs::write(&empty_cfg, empty.to_toml()).unwrap();
    let out = mmvl(&["eval", "--checkpoint", &ckpt, "--config", empty_cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[4] = 2;
    let bad = dir.path().join("v2.mmda");
    std::fs::write(&bad, bytes).unwrap();
    let out = mmvl(&["eval", "--checkpoint", bad.to_str().unwrap(), "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("version"), "{}", stderr(&out));

    // Checkpoint from a different architecture.
    let out = mmvl(&["eval", "--checkpoint", &ckpt]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("checkpoint"));
}

#[test]
fn gradcheck_passes_and_reports_zero_expert_gradient_without_media() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_train_config(dir.path()));
    let out = mmvl(&["gradcheck", "--config", &config]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let v = json(&out);
    assert_matches_schema("gradcheck_run.schema.json", &v);
    assert_eq!(v["text_only_visual_qkv_zero"], true);
    let ve = v["text_only"]["groups"].as_array().unwrap().iter().find(|g| g["group"] == "visual_qkv").unwrap();
    assert_eq!(ve["max_abs_analytic"].as_f64(), Some(0.0));
    for g in v["mixed"]["groups"].as_array().unwrap() {
        assert!(g["coordinates"].as_u64().unwrap() >= 20);
    }
}

#[test]
fn gradcheck_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_train_config(dir.path());
    cfg.gradcheck.tolerance = 1e-15;
    let config = write_config(dir.path(), &cfg);
    let out = mmvl(&["gradcheck", "--config", &config]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["passed"], false);
    assert!(!v["mixed"]["groups"][0]["failures"].as_array().unwrap().is_empty());
}
