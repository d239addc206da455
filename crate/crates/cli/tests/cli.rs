use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flowis::flow::{split_dataset, Checkpoint, FlowModel, TrainConfig};
use flowis::simulators::OutcomeDataset;

fn flowis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowis"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, dataset: serde_json::Value, flow: serde_json::Value) -> String {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "dataset": dataset,
        "flow": flow,
        "failure_regions": [{ "box": { "lo": [1.5, -0.5], "hi": [2.5, 0.5] } }],
        "methods": [{ "space": "latent", "method": { "kind": "ce", "config": { "samples_per_level": 300 } } }],
        "trials": 1,
        "seed": 7,
        "output_dir": "out"
    });
    let path = dir.join("cfg.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_train(epochs: usize) -> serde_json::Value {
    serde_json::json!({ "train": { "epochs": epochs, "layers": 2, "hidden": [8, 8], "seed": 5 } })
}

#[test]
fn simulate_robot_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "source": "robot", "n": 100 }), small_train(1));
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = flowis(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("100 rows"));
    }
    let ds = OutcomeDataset::load(&a.join("dataset.csv")).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(fs::read(a.join("dataset.csv")).unwrap(), fs::read(b.join("dataset.csv")).unwrap());
    assert_eq!(fs::read(a.join("dataset.json")).unwrap(), fs::read(b.join("dataset.json")).unwrap());
}

#[test]
fn unknown_simulator_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), serde_json::json!({ "source": "hovercraft", "n": 10 }), small_train(1));
    let o = flowis(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("robot") && err.contains("synthetic") && err.contains("file"), "{err}");

    let cfg = write_config(
        dir.path(),
        serde_json::json!({ "source": "synthetic", "target": "spiral", "n": 10 }),
        small_train(1),
    );
    let o = flowis(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("two_moons"));
}

#[test]
fn bad_arguments_exit_with_usage_code() {
    assert_eq!(flowis(&[]).status.code(), Some(1));
    assert_eq!(flowis(&["launch"]).status.code(), Some(1));
    assert_eq!(flowis(&["--help"]).status.code(), Some(0));
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = serde_json::json!({ "source": "synthetic", "target": "two_moons", "n": 500 });
    let cfg = write_config(dir.path(), dataset, small_train(0));
    let o = flowis(&["train", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let model = Checkpoint::load(out.join("flow.json")).unwrap().model;

    let data = flowis::experiment::DatasetSpec::Synthetic {
        target: flowis::simulators::SyntheticTarget::TwoMoons,
        n: 500,
    }
    .build(flowis::experiment::dataset_seed(7))
    .unwrap();
    let tc = TrainConfig {
        epochs: 0,
        layers: 2,
        hidden: vec![8, 8],
        seed: 5,
        ..TrainConfig::default()
    };
    let split = split_dataset(&data.outcomes, &tc).unwrap();
    let fresh = FlowModel::initialized(2, tc.arch(), split.standardizer, tc.seed).unwrap();
    assert_eq!(model.parameters(), fresh.parameters());
    let x = [0.3, -0.2];
    assert_eq!(model.flow_inverse(&x).unwrap(), fresh.flow_inverse(&x).unwrap());
    let curve = fs::read_to_string(out.join("training_curve.csv")).unwrap();
    assert_eq!(curve.trim(), "epoch,train_nll,val_nll");
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = serde_json::json!({ "source": "synthetic", "target": "gmm2", "n": 600 });
    let straight = write_config(dir.path(), dataset.clone(), small_train(3));
    let o = flowis(&["train", "--config", &straight, "--out", dir.path().join("straight").to_str().unwrap()]);
    assert!(o.status.success());

    let first = write_config(dir.path(), dataset.clone(), small_train(1));
    let o = flowis(&["train", "--config", &first, "--out", dir.path().join("part").to_str().unwrap()]);
    assert!(o.status.success());
    let rest = write_config(dir.path(), dataset, small_train(3));
    let part = dir.path().join("part").join("flow.json");
    let o = flowis(&[
        "train",
        "--config",
        &rest,
        "--resume",
        part.to_str().unwrap(),
        "--out",
        dir.path().join("resumed").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("straight/flow.json")).unwrap(),
        fs::read(dir.path().join("resumed/flow.json")).unwrap()
    );
}

#[test]
fn run_and_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let dataset = serde_json::json!({ "source": "synthetic", "target": "gmm2", "n": 1000 });
    let cfg = write_config(dir.path(), dataset, small_train(1));
    let text = fs::read_to_string(&cfg).unwrap().replace("\"trials\": 1", "\"trials\": 2");
    let text = text.replace("\"seed\": 7", "\"seed\": 7, \"n_eval\": 250, \"reference\": { \"n\": 20000, \"max_real\": 300 }");
    fs::write(&cfg, text).unwrap();
    let o = flowis(&["run", "--config", &cfg, "--jobs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run_dir = dir.path().join("out");
    let agg = fs::read_to_string(run_dir.join("aggregate.csv")).unwrap();
    assert_eq!(agg.lines().count(), 2);
    assert!(agg.starts_with("method,trials,failed,rel_error_mean,rel_error_std"));

    let o = flowis(&["report", run_dir.to_str().unwrap()]);
    assert!(o.status.success());
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("latent-ce")).count(), 1);
    let scatter = fs::read_to_string(run_dir.join("scatter/latent-ce_target.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 251);
}

#[test]
fn report_on_empty_dir_fails_with_listing() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowis(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("aggregate.csv") && err.contains("reference.json"), "{err}");
}
