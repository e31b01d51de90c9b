use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use hetxl_core::io::{read_dataset, read_head, TensorFile};

fn hetxl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetxl"))
        .args(args)
        .env_remove("HETXL_THREADS")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn small_config(dir: &Path, train: Value) -> Value {
    json!({
        "schema_version": 1,
        "dims": { "D": 4, "K": 5, "R": 2 },
        "data": { "N": 400, "seed": 3 },
        "model": { "kind": "het_xl", "seed": 1 },
        "train": train,
        "output_dir": dir.join("out"),
    })
}

fn quick_train(extra: Value) -> Value {
    let mut train = json!({
        "steps": 25,
        "batch_size": 32,
        "monitor_size": 64,
        "eval_samples": 32,
        "estimator": { "monte_carlo": { "samples": 4 } },
    });
    train.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    train
}

fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

fn run_ok(args: &[&str]) -> Output {
    let out = hetxl(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    out
}

fn tau_column(csv: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,nll,prec_at_1,tau,ms"));
    lines.map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn missing_dimension_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({ "schema_version": 1, "dims": { "K": 5, "R": 2 } });
    let path = write_config(dir.path(), "bad.json", &config);
    let out = hetxl(&["datagen", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("dims.D"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path(), json!({}));
    config["train"]["learning_rat"] = json!(0.1);
    let path = write_config(dir.path(), "typo.json", &config);
    let out = hetxl(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("learning_rat"), "{}", stderr(&out));
}

#[test]
fn datagen_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), json!({}));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    let first = std::fs::read(dir.path().join("out/dataset.hxlm")).unwrap();
    let truth = std::fs::read(dir.path().join("out/ground_truth.hxlm")).unwrap();
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    assert_eq!(first, std::fs::read(dir.path().join("out/dataset.hxlm")).unwrap());
    assert_eq!(truth, std::fs::read(dir.path().join("out/ground_truth.hxlm")).unwrap());
    let provenance: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/dataset.json")).unwrap()).unwrap();
    assert_eq!(provenance["schema_version"], 1);
    assert!(read_head(&dir.path().join("out/ground_truth.hxlm")).is_ok());
}

#[test]
fn default_config_writes_twenty_thousand_examples() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({
        "schema_version": 1,
        "dims": { "D": 16, "K": 40, "R": 4 },
        "output_dir": dir.path().join("run"),
    });
    let path = write_config(dir.path(), "default.json", &config);
    let out = run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    assert!(stdout(&out).contains("20000 examples"));
    let data = read_dataset(&dir.path().join("run/dataset.hxlm")).unwrap();
    assert_eq!((data.len(), data.num_features(), data.num_classes()), (20_000, 16, 40));
}

#[test]
fn fixed_temperature_gives_constant_tau_column() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), quick_train(json!({ "tau_mode": { "fixed": 1.0 } })));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    run_ok(&["train", "--config", path.to_str().unwrap()]);
    let taus = tau_column(&std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap());
    assert_eq!(taus.len(), 25);
    assert!(taus.iter().all(|&t| t == 1.0));
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/final_metrics.json")).unwrap()).unwrap();
    assert_eq!(summary["tau"], 1.0);
    assert!(summary["nll"].as_f64().unwrap() > 0.0);
    assert!((0.0..=1.0).contains(&summary["prec_at_1"].as_f64().unwrap()));
}

#[test]
fn learned_temperature_moves_within_bounds_and_reruns_match() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), quick_train(json!({ "tau_mode": "learned", "learning_rate": 0.3 })));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    run_ok(&["train", "--config", path.to_str().unwrap()]);
    let csv = std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap();
    let model = std::fs::read(dir.path().join("out/model.hxlm")).unwrap();
    let taus = tau_column(&csv);
    assert!(taus.iter().all(|&t| t > 0.05 && t < 5.0));
    assert!(taus.windows(2).any(|w| w[0] != w[1]), "τ never moved");
    run_ok(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("out/metrics.csv")).unwrap());
    assert_eq!(model, std::fs::read(dir.path().join("out/model.hxlm")).unwrap());
}

#[test]
fn shape_mismatch_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), quick_train(json!({})));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    let mut wider = config.clone();
    wider["dims"]["D"] = json!(5);
    let wider_path = write_config(dir.path(), "wide.json", &wider);
    let data = dir.path().join("out/dataset.hxlm");
    let out = hetxl(&["train", "--config", wider_path.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    run_ok(&["train", "--config", path.to_str().unwrap()]);
    let model = dir.path().join("out/model.hxlm");
    let out = hetxl(&["predict", "--config", wider_path.to_str().unwrap(), "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let missing = dir.path().join("nothing.hxlm");
    let out = hetxl(&["train", "--config", path.to_str().unwrap(), "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn predict_writes_probability_rows() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), quick_train(json!({})));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    run_ok(&["train", "--config", path.to_str().unwrap()]);
    run_ok(&["predict", "--config", path.to_str().unwrap()]);
    let file = TensorFile::read(&dir.path().join("out/predictions.hxlm")).unwrap();
    let p = file.require("P").unwrap().to_matrix();
    assert_eq!((p.nrows(), p.ncols()), (400, 5));
    for row in p.row_iter() {
        assert!((row.sum() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn verify_fast_reports_parameter_counts() {
    let out = run_ok(&["verify", "--level", "fast"]);
    let text = stdout(&out);
    assert!(text.contains("8,491,008") && text.contains("90,561,078"), "{text}");
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert!(text.contains("gradients"));
}

#[test]
fn bench_with_one_sample_count_has_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let config = json!({
        "schema_version": 1,
        "dims": { "D": 8, "K": 64, "R": 2 },
        "bench": { "samples": [1], "batch_sizes": [2], "reps": 5 },
        "output_dir": dir.path().join("bench"),
    });
    let path = write_config(dir.path(), "b.json", &config);
    run_ok(&["bench", "--config", path.to_str().unwrap()]);
    let csv = std::fs::read_to_string(dir.path().join("bench/bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,S,batch,ms_per_example,analytic_terms");
    assert_eq!(lines.len(), 3);
    let json: Value = serde_json::from_slice(&std::fs::read(dir.path().join("bench/bench.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    let out = hetxl(&["bench", "--config", write_config(dir.path(), "z.json", &json!({
        "schema_version": 1, "dims": { "D": 8, "K": 64, "R": 2 }, "bench": { "samples": [0] },
        "output_dir": dir.path().join("bench0"),
    })).to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grid_tau_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), quick_train(json!({ "steps": 10, "tau_mode": { "grid": [0.5, 1.0, 2.0] } })));
    let path = write_config(dir.path(), "c.json", &config);
    run_ok(&["datagen", "--config", path.to_str().unwrap()]);
    let out = run_ok(&["grid-tau", "--config", path.to_str().unwrap()]);
    assert!(stdout(&out).contains("over 3 values"));
    let csv = std::fs::read_to_string(dir.path().join("out/grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    let best = read_head(&dir.path().join("out/grid_model.hxlm")).unwrap().tau();
    assert!([0.5, 1.0, 2.0].contains(&best));
}

#[test]
fn thread_count_does_not_change_outputs() {
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path(), quick_train(json!({})));
        let path = write_config(dir.path(), "c.json", &config);
        run_ok(&["--threads", threads, "datagen", "--config", path.to_str().unwrap()]);
        run_ok(&["--threads", threads, "train", "--config", path.to_str().unwrap()]);
        let read = |name: &str| std::fs::read(dir.path().join("out").join(name)).unwrap();
        outputs.push((read("dataset.hxlm"), read("metrics.csv"), read("model.hxlm"), read("final_metrics.json")));
    }
    assert!(outputs[0] == outputs[1]);
}
