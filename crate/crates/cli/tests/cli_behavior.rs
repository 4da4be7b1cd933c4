//! Black-box tests of the command-line binary: exit codes, golden outputs,
//! pinned regression values and the feature-ingestion path.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use skycount::encoders::{encode_image, save_feature, FeatureRole, FeatureSidecar};
use skycount::io;
use skycount::model::{ModelConfig, ModelParams};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_skycount"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn skycount")
}

fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "expected success:\n{}{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("no exit code")
}

fn make_pipeline(dir: &Path, seed: u32, images: u32) {
    assert_ok(&run(bin()
        .args([
            "fixtures",
            "--images",
            &images.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(dir)));
    assert_ok(&run(bin().arg("curate").arg("--config").arg(dir.join("config.json"))));
}

#[test]
fn golden_manifest_for_three_image_fixture() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 11, 3);
    let got = std::fs::read(dir.path().join("manifest.json")).unwrap();
    let want = include_bytes!("golden/manifest.json");
    assert_eq!(got, want, "manifest drifted from the golden file");
}

#[test]
fn curate_rejects_empty_input_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("empty.jsonl");
    std::fs::write(&ann, "").unwrap();
    let cfg = serde_json::json!({
        "paths": {
            "annotations": ["empty.jsonl"],
            "out_dir": "out"
        }
    });
    let cfg_path = dir.path().join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let output = run(bin().arg("curate").arg("--config").arg(&cfg_path));
    assert_eq!(exit_code(&output), 2);
    assert!(!dir.path().join("out").exists(), "no output files on empty input");
}

#[test]
fn usage_errors_exit_one() {
    // Unknown flag.
    let output = run(bin().arg("curate").arg("--bogus"));
    assert_eq!(exit_code(&output), 1);

    // Missing config file.
    let output = run(bin().args(["curate", "--config", "/nonexistent/nope.json"]));
    assert_eq!(exit_code(&output), 1);

    // Threshold outside [0, 1].
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 3, 3);
    let output = run(bin()
        .args(["count", "--sample", "x", "--threshold", "1.5", "--config"])
        .arg(dir.path().join("config.json")));
    assert_eq!(exit_code(&output), 1);
}

#[test]
fn eval_without_calibration_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 7, 12);
    let output = run(bin().arg("eval").arg("--config").arg(dir.path().join("config.json")));
    assert_eq!(exit_code(&output), 1);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("calibration.json"), "stderr: {stderr}");

    // Bins before eval also names its prerequisite.
    let output = run(bin().arg("bins").arg("--config").arg(dir.path().join("config.json")));
    assert_eq!(exit_code(&output), 1);
    assert!(String::from_utf8_lossy(&output.stderr).contains("eval_samples.jsonl"));
}

/// Pinned regression: the verified pipeline at seed 7 over 20 fixture
/// images calibrates to sigma 0.77 / tau 0.05 and counts 32 tokens on
/// sample img0001__ring; an explicit threshold of 0 keeps all 48 queries.
#[test]
fn pinned_count_regression() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 7, 20);
    let cfg = dir.path().join("config.json");
    assert_ok(&run(bin().arg("calibrate").arg("--config").arg(&cfg)));

    let calib: Value = io::read_json(&dir.path().join("calibration.json")).unwrap();
    assert_eq!(calib["sigma_thr"], Value::from(0.77));
    assert_eq!(calib["tau"], Value::from(0.05));

    assert_ok(&run(bin()
        .args(["count", "--sample", "img0001__ring", "--config"])
        .arg(&cfg)));
    let record: Value = io::read_json(&dir.path().join("count_img0001__ring.json")).unwrap();
    assert_eq!(record["count"], Value::from(32));
    assert_eq!(record["threshold_used"], Value::from(0.77));
    assert_eq!(record["mode"], Value::from("few-shot"));

    // Threshold 0 keeps every selected query: k = min(900, 48).
    assert_ok(&run(bin()
        .args(["count", "--sample", "img0001__ring", "--threshold", "0.0", "--config"])
        .arg(&cfg)));
    let record: Value = io::read_json(&dir.path().join("count_img0001__ring.json")).unwrap();
    assert_eq!(record["count"], Value::from(48));
}

#[test]
fn zero_shot_mode_applies_the_adaptive_rule() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 7, 20);
    let cfg = dir.path().join("config.json");
    assert_ok(&run(bin().arg("calibrate").arg("--config").arg(&cfg)));

    // Calibrated sigma 0.77 and tau 0.05: any confident zero-shot sample
    // triples the threshold, clamped at 1.
    assert_ok(&run(bin()
        .args(["count", "--sample", "img0001__ring", "--mode", "zero-shot", "--config"])
        .arg(&cfg)));
    let record: Value = io::read_json(&dir.path().join("count_img0001__ring.json")).unwrap();
    assert_eq!(record["mode"], Value::from("zero-shot"));
    assert_eq!(record["threshold_used"], Value::from(1.0));
    assert_eq!(record["count"], Value::from(0));
}

#[test]
fn zero_shots_forces_the_zero_shot_path() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 7, 20);
    let cfg = dir.path().join("config.json");
    assert_ok(&run(bin().arg("calibrate").arg("--config").arg(&cfg)));
    assert_ok(&run(bin()
        .args(["count", "--sample", "img0001__ring", "--shots", "0", "--config"])
        .arg(&cfg)));
    let record: Value = io::read_json(&dir.path().join("count_img0001__ring.json")).unwrap();
    assert_eq!(record["mode"], Value::from("zero-shot"));
}

#[test]
fn count_ingests_feature_files() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 11, 3);
    let cfg_path = dir.path().join("config.json");

    // Persist encoder output for one curated sample as feature files.
    let sample_id = "img0000__ring";
    let image = io::load_tensor(&dir.path().join("images/img0000.ovct")).unwrap();
    let params = ModelParams::init(&ModelConfig::default(), 11).unwrap();
    let (z_cv, z_rs) = encode_image(&image, &params.encoder).unwrap();
    let feat_dir = dir.path().join("features").join(sample_id);
    std::fs::create_dir_all(&feat_dir).unwrap();
    for (i, level) in z_cv.levels().iter().enumerate() {
        save_feature(
            &feat_dir.join(format!("cv_level{i}.ovct")),
            &level.map,
            &FeatureSidecar {
                role: FeatureRole::CvPyramidLevel,
                stride: level.stride,
                level: i,
            },
        )
        .unwrap();
    }
    save_feature(
        &feat_dir.join("rs.ovct"),
        &z_rs,
        &FeatureSidecar {
            role: FeatureRole::RsMap,
            stride: 16,
            level: 0,
        },
    )
    .unwrap();

    // Point the config at the feature directory.
    let mut cfg: Value = io::read_json(&cfg_path).unwrap();
    cfg["paths"]["features"] = Value::from("features");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();

    let output = run(bin()
        .args(["count", "--sample", sample_id, "--threshold", "0.5", "--export-maps", "--config"])
        .arg(&cfg_path));
    assert_ok(&output);
    let record: Value =
        io::read_json(&dir.path().join(format!("count_{sample_id}.json"))).unwrap();
    assert!(record["count"].as_u64().is_some());
    assert!(dir.path().join(format!("map_{sample_id}.csv")).exists());
    assert!(dir.path().join(format!("map_{sample_id}.pgm")).exists());
}

#[test]
fn train_command_writes_checkpoint_and_log() {
    let dir = tempfile::tempdir().unwrap();
    make_pipeline(dir.path(), 7, 20);
    let cfg = dir.path().join("config.json");
    let output = run(bin().args(["train", "--steps", "2", "--config"]).arg(&cfg));
    assert_ok(&output);
    assert!(dir.path().join("checkpoint/manifest.json").exists());
    let log: Value = io::read_json(&dir.path().join("train_log.json")).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);

    // A checkpoint-backed eval run works end to end.
    let mut cfg_json: Value = io::read_json(&cfg).unwrap();
    cfg_json["paths"]["checkpoints"] = Value::from("checkpoint");
    std::fs::write(&cfg, serde_json::to_string_pretty(&cfg_json).unwrap()).unwrap();
    assert_ok(&run(bin().arg("calibrate").arg("--config").arg(&cfg)));
    assert_ok(&run(bin().arg("eval").arg("--config").arg(&cfg)));
    assert!(dir.path().join("report.json").exists());
}
