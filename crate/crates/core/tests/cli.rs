use std::fs;
use std::path::Path;
use std::process::ExitCode;

use pic_calibrate::cli;
use pic_calibrate::data::load_dataset;

fn run(dir: &Path, args: &[&str]) -> ExitCode {
    let d = dir.to_str().unwrap();
    let mut argv = vec!["piccal", "--quiet", "--out-dir", d];
    argv.extend_from_slice(args);
    cli::run(argv)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_dataset_truth_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let code = run(dir.path(), &["generate", "--steps", "3", "--n", "10", "--test-n", "4", "--noise", "0"]);
    assert_eq!(code, ExitCode::SUCCESS);
    assert_eq!(load_dataset(dir.path().join("dataset.jsonl"), None).unwrap().len(), 10);
    assert_eq!(load_dataset(dir.path().join("test.jsonl"), None).unwrap().len(), 4);
    let echo = json(&dir.path().join("generate.config.json"));
    assert_eq!(echo["tool"], "piccal");
    assert!(echo["argv"].as_array().unwrap().iter().any(|a| a == "generate"));
    assert!(dir.path().join("truth.json").exists());
}

#[test]
fn zero_epoch_calibration_returns_the_start_point() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["generate", "--steps", "3", "--n", "6"]), ExitCode::SUCCESS);
    let train = dir.path().join("dataset.jsonl");
    let code = run(
        dir.path(),
        &["calibrate", "--steps", "3", "--train", train.to_str().unwrap(), "--max-epochs", "0"],
    );
    assert_eq!(code, ExitCode::SUCCESS);
    let cal = json(&dir.path().join("calibration.json"));
    assert!(cal["result"]["loss_history"].as_array().unwrap().is_empty());
    assert!(cal["result"]["params"]["theta"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| (t.as_f64().unwrap() - std::f64::consts::FRAC_PI_4).abs() < 1e-15));
    assert!(dir.path().join("calibrate.config.json").exists());
}

#[test]
fn ideal_chip_reproduces_the_hadamard_walk() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["qw", "--steps", "6"]), ExitCode::SUCCESS);
    let report = json(&dir.path().join("qw.json"));
    assert!(report["report"]["l1"].as_f64().unwrap() < 1e-12);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["generate", "--steps", "0"]), ExitCode::from(2));
    assert_eq!(run(dir.path(), &["bogus"]), ExitCode::from(2));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        run(dir.path(), &["calibrate", "--steps", "3", "--train", missing.to_str().unwrap()]),
        ExitCode::from(3)
    );
    assert_eq!(
        run(dir.path(), &["tomo", "--steps", "6", "--depth", "4", "--settings-count", "2", "--strict"]),
        ExitCode::from(4)
    );
}
