use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{Dims, HeadKind, Tail};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sampling::{mc_predict, Head, InitScale, Link};
use crate::training::TemperatureParam;

use super::complexity::{complexity_terms, CostDims, CostTerms};

const WARMUPS: usize = 2;
const MIN_RESOLVED_MS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub variants: Vec<HeadKind>,
    pub samples: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![HeadKind::Het, HeadKind::HetXl],
            samples: vec![1, 10, 100, 1000],
            batch_sizes: vec![4],
            reps: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub variant: HeadKind,
    pub samples: usize,
    pub batch: usize,
    pub ms_per_example: f64,
    pub analytic: CostTerms,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn find(&self, variant: HeadKind, samples: usize, batch: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.variant == variant && r.samples == samples && r.batch == batch)
    }

    /// Header `variant,S,batch,ms_per_example,analytic_terms`; the analytic
    /// column holds the dominating-term cost.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,S,batch,ms_per_example,analytic_terms\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{:?},{:?}", r.variant.name(), r.samples, r.batch, r.ms_per_example, r.analytic.dominating)
                .unwrap();
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall-clock time per example of `mc_predict` for every
/// (variant, S, batch) combination, timed on a single worker thread.
pub fn bench_predict(dims: &Dims, config: &BenchConfig) -> Result<BenchReport> {
    dims.validate()?;
    if config.reps < 5 {
        return Err(Error::InvalidArgument(format!("bench needs at least 5 repetitions, got {}", config.reps)));
    }
    if config.samples.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument("S = 0 is not a valid sample count".into()));
    }
    if config.batch_sizes.is_empty() || config.batch_sizes.iter().any(|&b| b == 0) {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let base = RngStream::new(config.seed);
    let max_batch = *config.batch_sizes.iter().max().expect("non-empty");
    let mut g = base.split(0).generator();
    let inputs = DMatrix::from_fn(max_batch, dims.pre_logit_dim, |_, _| g.sample::<f64, _>(StandardNormal));
    let mut report = BenchReport::default();
    for (vi, &variant) in config.variants.iter().enumerate() {
        let head = Head::random(variant, dims, Tail::RankOne, TemperatureParam::Fixed(1.0), InitScale::default(), &base.split(1 + vi as u64))?;
        for &samples in &config.samples {
            for &batch in &config.batch_sizes {
                let phis = inputs.rows(0, batch).into_owned();
                let rng = base.split(100);
                let mut times = Vec::with_capacity(config.reps);
                for rep in 0..WARMUPS + config.reps {
                    let start = Instant::now();
                    let out = pool.install(|| mc_predict(&head, &phis, samples, Link::Softmax, &rng))?;
                    let ms = start.elapsed().as_secs_f64() * 1e3;
                    std::hint::black_box(out);
                    if rep >= WARMUPS {
                        times.push(ms / batch as f64);
                    }
                }
                let ms_per_example = median(times);
                if ms_per_example < MIN_RESOLVED_MS {
                    report.warnings.push(format!(
                        "{} S={samples} batch={batch}: median {ms_per_example:.5} ms is near timer resolution",
                        variant.name()
                    ));
                }
                let cost = CostDims {
                    pre_logit_dim: dims.pre_logit_dim as u64,
                    num_classes: dims.num_classes as u64,
                    num_factors: dims.num_factors as u64,
                    samples: samples as u64,
                };
                let analytic = match variant {
                    HeadKind::Het | HeadKind::HetXl => complexity_terms(variant, &cost)?,
                    _ => CostTerms { dominating: f64::NAN, full: f64::NAN },
                };
                report.rows.push(BenchRow {
                    variant,
                    samples,
                    batch,
                    ms_per_example: ms_per_example.max(f64::MIN_POSITIVE),
                    analytic,
                });
            }
        }
    }
    Ok(report)
}
