//! Synthetic discrete-choice data with a known heteroscedastic ground truth.
//!
//! Each label is `argmax_j (u_j(x) + ε_j(x))` for utilities `u(x) = W*ᵀx + b*`.
//! The multi-label variant (our extension) thresholds every class separately:
//! `y_j = 1[u_j(x) + ε_j(x) > 0]`, with logistic instead of Gumbel noise so
//! that the marginals are sigmoids.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{factor_matrix, CovarianceSpec, NoiseSpace, Tail};
use crate::error::{dim_check, Error, Result};
use crate::math::argmax;
use crate::rng::RngStream;
use crate::sampling::{mc_logits, noise_from_draws, Head, StandardDraws};
use crate::training::TemperatureParam;

/// Features and label indicator rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// N×D.
    pub features: DMatrix<f64>,
    /// N×K, one-hot (multi-class) or multi-hot (multi-label).
    pub labels: DMatrix<f64>,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DMatrix<f64>) -> Result<Self> {
        dim_check(features.nrows() == labels.nrows(), || {
            format!("{} feature rows vs {} label rows", features.nrows(), labels.nrows())
        })?;
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select_rows(indices),
        }
    }

    /// First positive class of every row.
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.row_iter().map(|r| argmax(r.iter().copied())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// One draw from the ground-truth head's `N(0, Σ*(x))` per example.
    Gaussian,
    /// i.i.d. Gumbel (logistic for multi-label) noise with the given scale.
    Gumbel { scale: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    MultiClass,
    MultiLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub ground_truth: Head,
    pub noise: NoiseKind,
    pub labels: LabelKind,
    pub num_examples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        self.ground_truth.validate()?;
        if self.num_examples == 0 {
            return Err(Error::InvalidArgument("synthetic dataset needs N ≥ 1".into()));
        }
        match self.noise {
            NoiseKind::Gaussian if self.ground_truth.covariance.is_none() => Err(Error::InvalidArgument(
                "Gaussian noise needs a ground-truth covariance".into(),
            )),
            NoiseKind::Gumbel { scale } if !(scale > 0.0 && scale.is_finite()) => {
                Err(Error::InvalidArgument(format!("Gumbel scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub spec: SyntheticSpec,
}

/// Ground truth of the default benchmark: D=16, K=40, R=4.
pub fn default_ground_truth(seed: u64) -> Head {
    synthetic_ground_truth(16, 40, 4, seed)
}

/// Random ground truth with pre-logit noise whose scale `v(x) = K_hetᵀx` has
/// no constant part, so the noise level varies strongly with the input.
pub fn synthetic_ground_truth(d: usize, k: usize, r: usize, seed: u64) -> Head {
    let mut g = RngStream::new(seed).split(0xC0FFEE).generator();
    let mut normal = |rows: usize, cols: usize, std: f64| {
        DMatrix::from_fn(rows, cols, |_, _| std * g.sample::<f64, _>(StandardNormal))
    };
    let weights = normal(d, k, 3.0 / (d as f64).sqrt());
    let bias = DVector::zeros(k);
    let factors = normal(r, d, 1.0 / (r as f64).sqrt());
    let scale_kernel = normal(d, d, 1.0 / (d as f64).sqrt());
    let tail_kernel = DMatrix::zeros(d, d);
    let spec = CovarianceSpec {
        space: NoiseSpace::PreLogit,
        tail: Tail::RankOne,
        factors,
        scale_kernel,
        scale_bias: DVector::zeros(d),
        tail_kernel,
        tail_bias: DVector::from_element(d, 0.05),
    };
    Head {
        weights,
        bias,
        covariance: Some(spec),
        temperature: TemperatureParam::Fixed(1.0),
    }
}

/// Default benchmark spec: Gaussian noise, multi-class, N = 20,000.
pub fn default_synthetic_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        ground_truth: default_ground_truth(seed),
        noise: NoiseKind::Gaussian,
        labels: LabelKind::MultiClass,
        num_examples: 20_000,
        seed,
    }
}

/// Label row for input `x` from one noise realization drawn on `rng`.
pub fn draw_label(spec: &SyntheticSpec, x: &DVector<f64>, rng: &mut impl Rng) -> Result<DVector<f64>> {
    let head = &spec.ground_truth;
    let k = head.num_classes();
    let utility = head.mean_logits(x)?;
    let perturbed: Vec<f64> = match spec.noise {
        NoiseKind::None => utility.iter().copied().collect(),
        NoiseKind::Gaussian => {
            let cov = head.covariance.as_ref().ok_or_else(|| {
                Error::InvalidArgument("Gaussian noise needs a ground-truth covariance".into())
            })?;
            let fm = factor_matrix(cov, x)?;
            let draws = StandardDraws::for_spec(cov, 1, rng);
            let logits = mc_logits(head, x, &noise_from_draws(&fm, &draws))?;
            logits.row(0).iter().copied().collect()
        }
        NoiseKind::Gumbel { scale } => {
            let gumbel = Gumbel::new(0.0, scale).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            utility
                .iter()
                .map(|&u| match spec.labels {
                    LabelKind::MultiClass => u + gumbel.sample(rng),
                    // Difference of two Gumbels is logistic.
                    LabelKind::MultiLabel => u + gumbel.sample(rng) - gumbel.sample(rng),
                })
                .collect()
        }
    };
    let mut y = DVector::zeros(k);
    match spec.labels {
        LabelKind::MultiClass => y[argmax(perturbed.iter().copied())] = 1.0,
        LabelKind::MultiLabel => {
            for (j, &u) in perturbed.iter().enumerate() {
                if u > 0.0 {
                    y[j] = 1.0;
                }
            }
        }
    }
    Ok(y)
}

/// Samples `N` examples; example `n` uses its own stream `split(n)` for the
/// features and then its noise, so the result ignores the rayon layout.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.ground_truth.pre_logit_dim();
    let k = spec.ground_truth.num_classes();
    let base = RngStream::new(spec.seed);
    let rows: Vec<Result<(DVector<f64>, DVector<f64>)>> = (0..spec.num_examples)
        .into_par_iter()
        .map(|n| {
            let mut g = base.split(n as u64).generator();
            let x = DVector::from_fn(d, |_, _| g.sample::<f64, _>(StandardNormal));
            let y = draw_label(spec, &x, &mut g)?;
            Ok((x, y))
        })
        .collect();
    let mut features = DMatrix::zeros(spec.num_examples, d);
    let mut labels = DMatrix::zeros(spec.num_examples, k);
    for (n, row) in rows.into_iter().enumerate() {
        let (x, y) = row?;
        features.set_row(n, &x.transpose());
        labels.set_row(n, &y.transpose());
    }
    Ok(SyntheticDataset {
        dataset: Dataset { features, labels },
        spec: spec.clone(),
    })
}

/// Shuffled index partition with split sizes `round(N·cumsum(f))`. Indices
/// inside each part are kept in ascending order.
pub fn split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidArgument("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions sum to {total}, expected 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStream::new(seed).generator());
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (i, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() { n } else { ((n as f64) * cum).round() as usize };
        if end <= start {
            return Err(Error::InvalidArgument(format!("split {i} would be empty")));
        }
        let mut part = order[start..end].to_vec();
        part.sort_unstable();
        parts.push(part);
        start = end;
    }
    Ok(parts)
}

pub fn split(dataset: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    Ok(split_indices(dataset.len(), fractions, seed)?
        .iter()
        .map(|idx| dataset.subset(idx))
        .collect())
}
