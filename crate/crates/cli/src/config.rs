//! The run configuration document.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "dims": { "D": 16, "K": 40, "R": 4, "H": null },
//!   "data": { "N": 20000, "noise": "gaussian", "labels": "multi_class", "seed": 0 },
//!   "model": { "kind": "het_xl", "tail": "rank_one", "seed": 0 },
//!   "train": { "steps": 2000, "tau_mode": "learned" },
//!   "meanfield": { "lambda": 0.39269908169872414, "quadrature_nodes": 200 },
//!   "bench": { "samples": [1, 1000], "reps": 5 },
//!   "output_dir": "run"
//! }
//! ```
//!
//! Only `schema_version` and `dims` are required. Unknown keys are rejected
//! at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hetxl_core::covariance::{Dims, HeadKind, Tail};
use hetxl_core::datagen::{synthetic_ground_truth, LabelKind, NoiseKind, SyntheticSpec};
use hetxl_core::diagnostics::BenchConfig;
use hetxl_core::meanfield::MeanFieldConfig;
use hetxl_core::sampling::Estimator;
use hetxl_core::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    #[serde(rename = "D")]
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "R")]
    pub r: usize,
    #[serde(rename = "H", default)]
    pub h: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub noise: NoiseKind,
    pub labels: LabelKind,
    pub seed: u64,
    /// Seed of the ground-truth head.
    pub ground_truth_seed: u64,
    /// Train, validation and test fractions.
    pub split: Vec<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 20_000,
            noise: NoiseKind::Gaussian,
            labels: LabelKind::MultiClass,
            seed: 0,
            ground_truth_seed: 0,
            split: vec![0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: HeadKind,
    pub tail: Tail,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: HeadKind::HetXl,
            tail: Tail::RankOne,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dims: DimsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub meanfield: MeanFieldConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("hetxl-run")
}

/// Turns serde's "missing field `D`" at path `dims` into the path `dims.D`.
fn schema_error(err: serde_path_to_error::Error<serde_json::Error>) -> ConfigError {
    let mut path = err.path().to_string();
    let message = err.inner().to_string();
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
    }
    ConfigError::Schema { path, message }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(schema_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: hetxl_core::Error| ConfigError::Invalid(e.to_string());
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let dims = self.head_dims().map_err(invalid)?;
        dims.noise_dim(self.model.kind).map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.meanfield.validate().map_err(invalid)?;
        if let Estimator::MeanField { lambda } = self.train.estimator {
            if lambda != self.meanfield.lambda {
                return Err(ConfigError::Invalid(format!(
                    "train.estimator λ = {lambda} disagrees with meanfield.lambda = {}",
                    self.meanfield.lambda
                )));
            }
        }
        if self.data.n == 0 {
            return Err(ConfigError::Invalid("data.N must be positive".into()));
        }
        hetxl_core::datagen::split_indices(self.data.n, &self.data.split, self.data.seed).map_err(invalid)?;
        self.synthetic_spec().validate().map_err(invalid)?;
        Ok(())
    }

    pub fn head_dims(&self) -> hetxl_core::Result<Dims> {
        let dims = Dims::new(self.dims.d, self.dims.k, self.dims.r)?;
        match self.dims.h {
            Some(h) => dims.with_buckets(h),
            None => Ok(dims),
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            ground_truth: synthetic_ground_truth(self.dims.d, self.dims.k, self.dims.r, self.data.ground_truth_seed),
            noise: self.data.noise,
            labels: self.data.labels,
            num_examples: self.data.n,
            seed: self.data.seed,
        }
    }
}
