use std::path::Path;

use tpp_core::harness::experiment::{run_experiment, METRICS_FILE};
use tpp_core::synth::SynthDataset;
use tpp_core::NetParams;

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("experiment.json");
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn appearance_pipeline_with_five_segments() {
    let dir = tempfile::tempdir().unwrap();
    SynthDataset::default().write(&dir.path().join("data")).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"manifest": "data/manifest.json", "out_dir": "run", "seed": 1,
            "stages": ["eval", "train"], "network": "appearance", "metric": "accuracy",
            "train": {"hidden_dim": 8, "epochs": 15, "learning_rate": 0.01, "pyramid": {"segments": 5}}}"#,
    );
    let outcome = run_experiment(&cfg).unwrap();
    let net = NetParams::load(&dir.path().join("run/net.bin")).unwrap();
    assert_eq!(net.pooled_dim(), 6 * 8);
    let report = outcome.report.unwrap();
    let mean = report.per_class.iter().flatten().sum::<f64>() / report.per_class.len() as f64;
    assert!((report.aggregate - mean).abs() < 1e-12);
    assert!(report.aggregate > 0.5, "{report:?}");
    assert!(dir.path().join("run").join(METRICS_FILE).is_file());
    let log = std::fs::read_to_string(dir.path().join("run/run.log")).unwrap();
    assert!(log.contains("train[Appearance]"));
}

#[test]
fn missing_stage_output_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    SynthDataset::default().write(&dir.path().join("data")).unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"manifest": "data/manifest.json", "out_dir": "run", "seed": 1,
            "stages": ["encode-motion"], "network": "motion", "metric": "map"}"#,
    );
    let err = run_experiment(&cfg).unwrap_err();
    assert_eq!(err.kind(), "dependency");
    assert!(err.to_string().contains("model.gmm"));
    // The log still records the failure.
    let log = std::fs::read_to_string(dir.path().join("run/run.log")).unwrap();
    assert!(log.contains("encode-motion: failed"));
}

#[test]
fn stages_resume_from_saved_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    SynthDataset::default().write(&dir.path().join("data")).unwrap();
    let head = r#""manifest": "data/manifest.json", "out_dir": "run", "seed": 4, "network": "early-fusion", "metric": "map",
        "gmm": {"components": 2}, "train": {"hidden_dim": 8, "epochs": 4, "pyramid": {"segments": 2}}"#;
    let all = write_config(dir.path(), &format!(r#"{{{head}, "stages": ["fit-gmm", "encode-motion", "train", "eval"]}}"#));
    let full = run_experiment(&all).unwrap().report.unwrap();

    let eval_only = write_config(dir.path(), &format!(r#"{{{head}, "stages": ["eval"]}}"#));
    let resumed = run_experiment(&eval_only).unwrap().report.unwrap();
    assert_eq!(full, resumed);
}

#[test]
fn unknown_config_field_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"manifest": "m.json", "out_dir": "run", "seed": 1, "stages": ["train"],
            "network": "appearance", "metric": "map", "learning_rate": 0.1}"#,
    );
    assert_eq!(run_experiment(&cfg).unwrap_err().kind(), "config");
}
