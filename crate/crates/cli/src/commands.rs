use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use hetxl_core::datagen::{make_synthetic, split, Dataset, LabelKind};
use hetxl_core::diagnostics::bench_predict;
use hetxl_core::io::{read_dataset, read_head, write_dataset, write_head, Tensor, TensorFile};
use hetxl_core::rng::RngStream;
use hetxl_core::sampling::{predict as run_predict, Head, InitScale};
use hetxl_core::training::{evaluate, grid_search_tau, train as run_train, TauMode, TemperatureParam, DEFAULT_TAU_GRID};
use hetxl_core::verify::{self, Level};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Verify(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<hetxl_core::Error> for CliError {
    fn from(e: hetxl_core::Error) -> Self {
        match e {
            hetxl_core::Error::InvalidArgument(msg) => CliError::Config(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn json_text(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON values serialize");
    s.push('\n');
    s
}

fn output_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn load_dataset(config: &RunConfig, data: Option<PathBuf>) -> Result<Dataset, CliError> {
    let path = data.unwrap_or_else(|| config.output_dir.join("dataset.hxlm"));
    let dataset = read_dataset(&path).map_err(|e| io_err(&path, e))?;
    if dataset.num_features() != config.dims.d || dataset.num_classes() != config.dims.k {
        return Err(CliError::Data(format!(
            "{} has D={}, K={} but the config declares D={}, K={}",
            path.display(),
            dataset.num_features(),
            dataset.num_classes(),
            config.dims.d,
            config.dims.k
        )));
    }
    Ok(dataset)
}

/// Train, validation and test folds; missing folds fall back to the previous one.
fn folds(config: &RunConfig, data: &Dataset) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let mut parts = split(data, &config.data.split, config.data.seed)?.into_iter();
    let train = parts.next().expect("at least one fold");
    let val = parts.next().unwrap_or_else(|| train.clone());
    let test = parts.next().unwrap_or_else(|| val.clone());
    Ok((train, val, test))
}

fn initial_head(config: &RunConfig) -> Result<Head, CliError> {
    Ok(Head::random(
        config.model.kind,
        &config.head_dims()?,
        config.model.tail,
        TemperatureParam::Fixed(1.0),
        InitScale::default(),
        &RngStream::new(config.model.seed),
    )?)
}

pub fn datagen(path: &Path, verbose: bool) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    let spec = config.synthetic_spec();
    let data = make_synthetic(&spec)?.dataset;
    let dir = output_dir(&config)?;
    let data_path = dir.join("dataset.hxlm");
    write_dataset(&data, &data_path).map_err(|e| io_err(&data_path, e))?;
    let truth_path = dir.join("ground_truth.hxlm");
    write_head(&spec.ground_truth, &truth_path).map_err(|e| io_err(&truth_path, e))?;
    let mut provenance = json!({
        "schema_version": crate::config::SCHEMA_VERSION,
        "generator": "discrete_choice",
        "dims": config.dims,
        "data": config.data,
        "ground_truth": "ground_truth.hxlm",
    });
    if config.data.labels == LabelKind::MultiLabel {
        provenance["extension"] = json!("multi-label labels threshold each utility plus noise at zero");
    }
    write_text(&dir.join("dataset.json"), &json_text(&provenance))?;
    println!(
        "datagen: wrote {} examples (D={}, K={}) to {}",
        data.len(),
        config.dims.d,
        config.dims.k,
        data_path.display()
    );
    if verbose {
        let counts = data.labels.row_sum();
        eprintln!("label counts: {:?}", counts.iter().map(|c| *c as u64).collect::<Vec<_>>());
    }
    Ok(())
}

pub fn train(path: &Path, data: Option<PathBuf>, timing: bool, verbose: bool) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    let dataset = load_dataset(&config, data)?;
    let (train_set, _, test) = folds(&config, &dataset)?;
    let outcome = run_train(initial_head(&config)?, &train_set, &config.train)?;
    let dir = output_dir(&config)?;
    let model_path = dir.join("model.hxlm");
    write_head(&outcome.head, &model_path).map_err(|e| io_err(&model_path, e))?;
    write_text(&dir.join("metrics.csv"), &outcome.trace.to_csv(timing))?;
    let rng = RngStream::new(config.train.seed).split(4);
    let metrics = evaluate(&outcome.head, &test, config.train.eval_estimator(), config.train.link, &rng)?;
    let summary = json!({
        "nll": metrics.nll,
        "prec_at_1": metrics.prec_at_1,
        "tau": outcome.head.tau(),
        "split": "test",
    });
    write_text(&dir.join("final_metrics.json"), &json_text(&summary))?;
    println!(
        "train: {} steps, test nll {:.4}, prec@1 {:.4}, tau {:.4}",
        outcome.trace.len(),
        metrics.nll,
        metrics.prec_at_1,
        outcome.head.tau()
    );
    if verbose {
        if let Some(first) = outcome.trace.steps.first() {
            eprintln!("monitor nll {:.4} -> {:.4}", first.nll, outcome.final_metrics.nll);
        }
    }
    Ok(())
}

pub fn predict(path: &Path, model: Option<PathBuf>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    let model_path = model.unwrap_or_else(|| config.output_dir.join("model.hxlm"));
    let head = read_head(&model_path).map_err(|e| io_err(&model_path, e))?;
    let dataset = load_dataset(&config, data)?;
    if head.pre_logit_dim() != dataset.num_features() || head.num_classes() != dataset.num_classes() {
        return Err(CliError::Data(format!(
            "model is D={}, K={} but the data is D={}, K={}",
            head.pre_logit_dim(),
            head.num_classes(),
            dataset.num_features(),
            dataset.num_classes()
        )));
    }
    let rng = RngStream::new(config.train.seed).split(5);
    let batch = run_predict(&head, &dataset.features, config.train.eval_estimator(), config.train.link, &rng)?;
    let out = match out {
        Some(p) => p,
        None => output_dir(&config)?.join("predictions.hxlm"),
    };
    let mut file = TensorFile::default();
    file.push(Tensor::from_matrix("P", &batch.probs));
    file.write(&out).map_err(|e| io_err(&out, e))?;
    println!("predict: wrote {}×{} probabilities to {}", batch.len(), batch.num_classes(), out.display());
    Ok(())
}

pub fn verify(level: Level) -> Result<(), CliError> {
    let report = verify::run(level);
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        let failed = report.checks.iter().filter(|c| !c.passed).count();
        Err(CliError::Verify(format!("{failed} check(s) failed")))
    }
}

pub fn bench(path: &Path) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    let report = bench_predict(&config.head_dims()?, &config.bench)?;
    let dir = output_dir(&config)?;
    write_text(&dir.join("bench.csv"), &report.to_csv())?;
    let value = serde_json::to_value(&report).expect("report serializes");
    write_text(&dir.join("bench.json"), &json_text(&value))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for r in &report.rows {
        println!(
            "bench: {} S={} batch={} {:.4} ms/example (analytic {:.3e})",
            r.variant.name(),
            r.samples,
            r.batch,
            r.ms_per_example,
            r.analytic.dominating
        );
    }
    Ok(())
}

pub fn grid_tau(path: &Path, data: Option<PathBuf>, verbose: bool) -> Result<(), CliError> {
    let config = RunConfig::load(path)?;
    let dataset = load_dataset(&config, data)?;
    let (train_set, val, _) = folds(&config, &dataset)?;
    let grid = match &config.train.tau_mode {
        TauMode::Grid(grid) => grid.clone(),
        _ => DEFAULT_TAU_GRID.to_vec(),
    };
    let search = grid_search_tau(&initial_head(&config)?, &train_set, &val, &config.train, &grid)?;
    let dir = output_dir(&config)?;
    let mut csv = String::from("tau,val_nll,val_prec_at_1,train_nll,train_prec_at_1\n");
    for p in &search.points {
        writeln!(csv, "{:?},{:?},{:?},{:?},{:?}", p.tau, p.val.nll, p.val.prec_at_1, p.train.nll, p.train.prec_at_1)
            .expect("string write");
    }
    write_text(&dir.join("grid.csv"), &csv)?;
    let value = json!({ "best_tau": search.best_tau, "points": search.points });
    write_text(&dir.join("grid.json"), &json_text(&value))?;
    let model_path = dir.join("grid_model.hxlm");
    write_head(&search.best.head, &model_path).map_err(|e| io_err(&model_path, e))?;
    println!("grid-tau: best tau {} over {} values", search.best_tau, grid.len());
    if verbose {
        for p in &search.points {
            eprintln!("tau {:>5}: val nll {:.4}", p.tau, p.val.nll);
        }
    }
    Ok(())
}
