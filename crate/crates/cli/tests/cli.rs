mod common;

use std::path::Path;
use std::process::Command;

use rsdgan_cli::{run, ExperimentConfig, Stage};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rsdgan"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn empty_stage_list_succeeds_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!("[experiment]\nseed = 1\nout_dir = \"{}\"\nstages = []\n", out.display());
    let cfg = write_config(dir.path(), &text);
    let status = bin().args(["run", "--config"]).arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("[experiment]\nseed = 1\nout_dir = \"{}\"\ncolour = 3\n", dir.path().join("o").display());
    let cfg = write_config(dir.path(), &text);
    let o = bin().args(["run", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("colour"));
}

#[test]
fn missing_seed_and_bad_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[experiment]\nout_dir = \"x\"\n");
    assert_eq!(bin().args(["run", "--config"]).arg(&cfg).status().unwrap().code(), Some(2));
    let text = format!("[experiment]\nseed = 1\nout_dir = \"{}\"\nrepetitions = 0\n", dir.path().join("o").display());
    let cfg = write_config(dir.path(), &text);
    assert_eq!(bin().args(["run", "--config"]).arg(&cfg).status().unwrap().code(), Some(2));
    assert_eq!(bin().args(["run", "--config", "/nonexistent.toml"]).status().unwrap().code(), Some(2));
}

#[test]
fn stage_without_inputs_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let text = format!("[experiment]\nseed = 1\nout_dir = \"{}\"\n", out.display());
    let cfg = write_config(dir.path(), &text);
    let o = bin().args(["train-victim", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train-victim") && err.contains("corpus"), "{err}");
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("elsewhere");
    let text = format!("[experiment]\nseed = 1\nout_dir = \"{}\"\n", dir.path().join("o").display());
    let cfg = write_config(dir.path(), &text);
    let status = bin()
        .args(["corpus", "--seed", "9", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("corpus/train/manifest.txt").exists());
    assert!(!dir.path().join("o").exists());
}

#[test]
fn derived_seeds_differ_by_label_and_repetition() {
    let cfg = ExperimentConfig::from_toml("[experiment]\nseed = 3\nout_dir = \"o\"\n").unwrap();
    let a = cfg.derived_seed("gan-ring", 0);
    assert_ne!(a, cfg.derived_seed("gan-ring", 1));
    assert_ne!(a, cfg.derived_seed("gan-speech", 0));
    assert_eq!(a, cfg.derived_seed("gan-ring", 0));
    assert_eq!(cfg.experiment.repetitions, 3);
    assert_eq!(cfg.experiment.stages, Stage::ALL.to_vec());
}

#[test]
fn smoke_pipeline_emits_one_row_per_defense() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = ExperimentConfig::from_toml(&common::smoke_toml(&out)).unwrap();
    run(&cfg).unwrap();
    let csv = std::fs::read_to_string(out.join("report/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# config {}", cfg.hash()));
    lines.next();
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, vec!["No defense", "SD-GAN", "RSD-GAN"]);
    let text = std::fs::read_to_string(out.join("report/report.txt")).unwrap();
    assert!(text.contains("RSD-GAN"));
    for marker in ["corpus", "victim", "attack", "rep_0/gan", "rep_1/evaluate", "report"] {
        let m = std::fs::read_to_string(out.join(marker).join("stage.json")).unwrap();
        assert!(m.contains(&cfg.hash()), "{marker}");
    }
    // A rerun of one stage on the same inputs rewrites the same bytes.
    let before = std::fs::read(out.join("attack/attack.json")).unwrap();
    let again = ExperimentConfig {
        experiment: rsdgan_cli::config::ExperimentSection {
            stages: vec![Stage::Attack],
            ..cfg.experiment.clone()
        },
        ..cfg.clone()
    };
    assert_eq!(again.hash(), cfg.hash());
    run(&again).unwrap();
    assert_eq!(before, std::fs::read(out.join("attack/attack.json")).unwrap());
}
