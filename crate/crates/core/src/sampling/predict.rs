use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{factor_matrix, Projection, Tail};
use crate::error::{dim_check, Error, Result};
use crate::math::sigmoid;
use crate::rng::RngStream;

use super::head::{Estimator, Head, Link};
use super::noise::{add_to_rows, mc_logits, noise_from_draws, StandardDraws};

/// Samples evaluated together; bounds memory at large K without changing the
/// draws, which are consumed sequentially from one stream per example.
const SAMPLE_CHUNK: usize = 256;

/// Per-example class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBatch {
    /// N×K.
    pub probs: DMatrix<f64>,
    pub link: Link,
    pub estimator: Estimator,
}

impl PredictiveBatch {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.probs.ncols()
    }

    /// Checks the simplex (softmax) or open-interval (sigmoid) invariant.
    pub fn check_invariants(&self) -> Result<()> {
        for (n, row) in self.probs.row_iter().enumerate() {
            match self.link {
                Link::Softmax => {
                    let total: f64 = row.iter().sum();
                    if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                        return Err(Error::Numeric(format!("example {n}: softmax row sums to {total}")));
                    }
                }
                Link::Sigmoid => {
                    if row.iter().any(|&p| !(0.0..=1.0).contains(&p) || p.is_nan()) {
                        return Err(Error::Numeric(format!("example {n}: sigmoid output outside [0, 1]")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Adds `link(logits/τ)` of every row into `acc`.
fn check_batch(head: &Head, phis: &DMatrix<f64>) -> Result<()> {
    head.validate()?;
    dim_check(phis.ncols() == head.pre_logit_dim(), || {
        format!("inputs have {} columns, head expects D = {}", phis.ncols(), head.pre_logit_dim())
    })
}

fn collect_rows(rows: Vec<Result<Vec<f64>>>, k: usize) -> Result<DMatrix<f64>> {
    let mut probs = DMatrix::zeros(rows.len(), k);
    for (n, row) in rows.into_iter().enumerate() {
        let row = row?;
        for j in 0..k {
            probs[(n, j)] = row[j];
        }
    }
    Ok(probs)
}

/// Per-example working set of `K·chunk` values; larger chunks spill out of cache.
const CHUNK_ELEMENTS: usize = 1 << 17;

/// Below this many samples the copy of `Wᵀ` costs more than it saves.
const TRANSPOSE_MIN_SAMPLES: usize = 32;

/// Transposed operands shared by every example of a batch.
struct McOperands {
    /// `Wᵀ`, K×D, for pre-logit noise.
    weights_t: Option<DMatrix<f64>>,
}

impl McOperands {
    fn new(head: &Head, samples: usize) -> Self {
        let weights_t = match head.projection() {
            Some(Projection::Dense(w)) if samples >= TRANSPOSE_MIN_SAMPLES => Some(w.transpose()),
            _ => None,
        };
        Self { weights_t }
    }
}

/// Adds the link of `(column + mean)/τ` over the columns of a K×S matrix.
/// Returns false if any logit is not finite.
fn accumulate_columns(noise_t: &DMatrix<f64>, mean: &DVector<f64>, tau: f64, link: Link, acc: &mut [f64]) -> bool {
    let k = noise_t.nrows();
    let inv_tau = 1.0 / tau;
    let mut out = vec![0.0; k];
    let mut finite = true;
    for column in noise_t.as_slice().chunks(k) {
        let mut max = f64::NEG_INFINITY;
        for ((o, &x), &m) in out.iter_mut().zip(column).zip(mean.iter()) {
            let u = x + m;
            finite &= u.is_finite();
            *o = u * inv_tau;
            max = max.max(*o);
        }
        match link {
            Link::Softmax => {
                let mut total = 0.0;
                for o in out.iter_mut() {
                    *o = (*o - max).exp();
                    total += *o;
                }
                let scale = 1.0 / total;
                for (a, o) in acc.iter_mut().zip(&out) {
                    *a += o * scale;
                }
            }
            Link::Sigmoid => {
                for (a, &o) in acc.iter_mut().zip(&out) {
                    *a += sigmoid(o);
                }
            }
        }
    }
    finite
}

fn non_finite(n: usize) -> Error {
    Error::Numeric(format!("non-finite logits for example {n}"))
}

fn mc_example(head: &Head, ops: &McOperands, phi: &DVector<f64>, samples: usize, link: Link, stream: RngStream, n: usize) -> Result<Vec<f64>> {
    let k = head.num_classes();
    let tau = head.tau();
    let mut acc = vec![0.0; k];
    let mean = head.mean_logits(phi)?;
    let Some(spec) = &head.covariance else {
        if !accumulate_columns(&DMatrix::zeros(k, 1), &mean, tau, link, &mut acc) {
            return Err(non_finite(n));
        }
        return Ok(acc);
    };
    let fm = factor_matrix(spec, phi)?;
    let q = spec.noise_dim();
    let factors_t = fm.factors.transpose();
    let tail_scale: DVector<f64> = match fm.tail {
        Tail::RankOne => fm.tail_vector.clone(),
        Tail::Diagonal => fm.tail_vector.map(f64::sqrt),
    };
    let step = (CHUNK_ELEMENTS / k.max(q)).clamp(1, SAMPLE_CHUNK);
    let mut g = stream.generator();
    // Noise in Q×S orientation: one contiguous column per sample.
    let mut noise_t = DMatrix::zeros(q, 0);
    let mut projected = DMatrix::zeros(k, 0);
    let mut done = 0;
    while done < samples {
        let chunk = step.min(samples - done);
        if noise_t.ncols() != chunk {
            noise_t = DMatrix::zeros(q, chunk);
            if head.projection().is_some() {
                projected = DMatrix::zeros(k, chunk);
            }
        }
        let draws = StandardDraws::for_spec(spec, chunk, &mut g);
        noise_t.gemm(1.0, &factors_t, &draws.factor.transpose(), 0.0);
        for (s, mut col) in noise_t.column_iter_mut().enumerate() {
            match fm.tail {
                Tail::RankOne => col.axpy(draws.tail[(s, 0)], &tail_scale, 1.0),
                Tail::Diagonal => {
                    for j in 0..q {
                        col[j] += draws.tail[(s, j)] * tail_scale[j];
                    }
                }
            }
        }
        let logits_t = match (head.projection(), &ops.weights_t) {
            (Some(Projection::Dense(_)), Some(w_t)) => {
                projected.gemm(1.0, w_t, &noise_t, 0.0);
                &projected
            }
            (Some(Projection::Dense(w)), None) => {
                projected.gemm_tr(1.0, w, &noise_t, 0.0);
                &projected
            }
            (Some(Projection::Buckets(map)), _) => {
                for (s, mut col) in projected.column_iter_mut().enumerate() {
                    for (j, v) in col.iter_mut().enumerate() {
                        *v = noise_t[(map.bucket(j), s)];
                    }
                }
                &projected
            }
            _ => &noise_t,
        };
        if !accumulate_columns(logits_t, &mean, tau, link, &mut acc) {
            return Err(non_finite(n));
        }
        done += chunk;
    }
    for a in &mut acc {
        *a /= samples as f64;
    }
    Ok(acc)
}

/// Monte-Carlo predictive `(1/S)·Σ_s σ(logits_s/τ)` for every row of `phis`.
///
/// Example `n` draws from `rng.split(n)`, so the result does not depend on the
/// batch composition or on the rayon thread count.
pub fn mc_predict(head: &Head, phis: &DMatrix<f64>, samples: usize, link: Link, rng: &RngStream) -> Result<PredictiveBatch> {
    check_batch(head, phis)?;
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one MC sample is required".into()));
    }
    let ops = McOperands::new(head, samples);
    let rows: Vec<Result<Vec<f64>>> = (0..phis.nrows())
        .into_par_iter()
        .map(|n| {
            let phi = phis.row(n).transpose();
            mc_example(head, &ops, &phi, samples, link, rng.split(n as u64), n)
        })
        .collect();
    Ok(PredictiveBatch {
        probs: collect_rows(rows, head.num_classes())?,
        link,
        estimator: Estimator::MonteCarlo { samples },
    })
}

/// `σ((Wᵀφ + b)/τ)`, ignoring any covariance.
pub fn deterministic_predict(head: &Head, phis: &DMatrix<f64>, link: Link) -> Result<PredictiveBatch> {
    check_batch(head, phis)?;
    let k = head.num_classes();
    let tau = head.tau();
    let rows: Vec<Result<Vec<f64>>> = (0..phis.nrows())
        .map(|n| {
            let mean = head.mean_logits(&phis.row(n).transpose())?;
            let mut acc = vec![0.0; k];
            if !accumulate_columns(&DMatrix::zeros(k, 1), &mean, tau, link, &mut acc) {
                return Err(non_finite(n));
            }
            Ok(acc)
        })
        .collect();
    Ok(PredictiveBatch {
        probs: collect_rows(rows, k)?,
        link,
        estimator: Estimator::Deterministic,
    })
}

/// Dispatches on the estimator.
pub fn predict(head: &Head, phis: &DMatrix<f64>, estimator: Estimator, link: Link, rng: &RngStream) -> Result<PredictiveBatch> {
    match estimator {
        Estimator::MonteCarlo { samples } => mc_predict(head, phis, samples, link, rng),
        Estimator::MeanField { lambda } => crate::meanfield::mf_predict(head, phis, link, lambda),
        Estimator::Deterministic => deterministic_predict(head, phis, link),
    }
}

/// Empirical mean and (unbiased) covariance of `S` sampled logit vectors.
/// Temperature is not applied.
pub fn logit_moments(head: &Head, phi: &DVector<f64>, samples: usize, rng: &RngStream) -> Result<(DVector<f64>, DMatrix<f64>)> {
    head.validate()?;
    if samples < 2 {
        return Err(Error::InvalidArgument("logit moments need at least two samples".into()));
    }
    let k = head.num_classes();
    let spec = match &head.covariance {
        None => return Ok((head.mean_logits(phi)?, DMatrix::zeros(k, k))),
        Some(spec) => spec,
    };
    let fm = factor_matrix(spec, phi)?;
    let mut g = rng.generator();
    let mut sum = DVector::zeros(k);
    let mut cross = DMatrix::zeros(k, k);
    let mut done = 0;
    // Moments are accumulated around the analytic mean to limit cancellation.
    let center = head.mean_logits(phi)?;
    while done < samples {
        let chunk = SAMPLE_CHUNK.min(samples - done);
        let draws = StandardDraws::for_spec(spec, chunk, &mut g);
        let mut logits = mc_logits(head, phi, &noise_from_draws(&fm, &draws))?;
        add_to_rows(&mut logits, center.as_slice(), -1.0);
        sum += logits.row_sum().transpose();
        cross += logits.tr_mul(&logits);
        done += chunk;
    }
    let s = samples as f64;
    let mean_offset = &sum / s;
    let cov = (cross - &mean_offset * mean_offset.transpose() * s) / (s - 1.0);
    Ok((center + mean_offset, cov))
}
