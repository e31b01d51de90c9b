//! Reparametrized noise draws `ε = (1 vᵀ)∘(Z J) + tail`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{factor_matrix, CovarianceSpec, FactorMatrix, Projection, Tail};
use crate::error::{dim_check, Result};
use crate::rng::RngStream;

use super::head::Head;

/// Standard-normal inputs of the reparametrization for `S` samples.
///
/// Sample `s` consumes `R` factor draws followed by its tail draws (one for the
/// rank-one tail, `Q` for the diagonal tail), so the first `S` samples of a
/// stream do not depend on how many samples are requested in total.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardDraws {
    /// `Z`, S×R.
    pub factor: DMatrix<f64>,
    /// `z`, S×1 (rank-one) or S×Q (diagonal).
    pub tail: DMatrix<f64>,
}

impl StandardDraws {
    pub fn sample(rng: &mut impl Rng, samples: usize, num_factors: usize, tail_width: usize) -> Self {
        let mut factor = DMatrix::zeros(samples, num_factors);
        let mut tail = DMatrix::zeros(samples, tail_width);
        for s in 0..samples {
            for r in 0..num_factors {
                factor[(s, r)] = rng.sample(StandardNormal);
            }
            for c in 0..tail_width {
                tail[(s, c)] = rng.sample(StandardNormal);
            }
        }
        Self { factor, tail }
    }

    pub fn for_spec(spec: &CovarianceSpec, samples: usize, rng: &mut impl Rng) -> Self {
        Self::sample(rng, samples, spec.num_factors(), tail_width(spec.tail, spec.noise_dim()))
    }

    pub fn samples(&self) -> usize {
        self.factor.nrows()
    }
}

pub(crate) fn tail_width(tail: Tail, noise_dim: usize) -> usize {
    match tail {
        Tail::RankOne => 1,
        Tail::Diagonal => noise_dim,
    }
}

/// Maps standard draws to `N(0, Σ(x))` samples, S×Q.
pub fn noise_from_draws(fm: &FactorMatrix, draws: &StandardDraws) -> DMatrix<f64> {
    let mut noise = &draws.factor * &fm.factors;
    let d = &fm.tail_vector;
    match fm.tail {
        Tail::RankOne => {
            for j in 0..noise.ncols() {
                for s in 0..noise.nrows() {
                    noise[(s, j)] += draws.tail[(s, 0)] * d[j];
                }
            }
        }
        Tail::Diagonal => {
            for j in 0..noise.ncols() {
                let sd = d[j].sqrt();
                for s in 0..noise.nrows() {
                    noise[(s, j)] += draws.tail[(s, j)] * sd;
                }
            }
        }
    }
    noise
}

/// `S` samples of `ε(x) ~ N(0, Σ(x))`, one per row. Deterministic in `rng`.
pub fn draw_noise(spec: &CovarianceSpec, phi: &DVector<f64>, samples: usize, rng: &RngStream) -> Result<DMatrix<f64>> {
    let fm = factor_matrix(spec, phi)?;
    let draws = StandardDraws::for_spec(spec, samples, &mut rng.generator());
    Ok(noise_from_draws(&fm, &draws))
}

/// Per-sample logits `1 μᵀ + ε·P`, S×K, where `μ = Wᵀφ + b`.
///
/// For pre-logit noise this is `(1φᵀ + ε)W + 1bᵀ`.
pub fn mc_logits(head: &Head, phi: &DVector<f64>, noise: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mean = head.mean_logits(phi)?;
    match head.projection() {
        None => {
            dim_check(noise.ncols() == 0 || noise.iter().all(|&x| x == 0.0), || {
                "deterministic head takes no noise".into()
            })?;
            Ok(broadcast_rows(&mean, noise.nrows()))
        }
        Some(Projection::Dense(w)) => {
            dim_check(noise.ncols() == w.nrows(), || {
                format!("noise has {} columns, expected {}", noise.ncols(), w.nrows())
            })?;
            // (1φᵀ + ε)W keeps the injected noise on the pre-logits.
            let mut pre = noise.clone();
            add_to_rows(&mut pre, phi.as_slice(), 1.0);
            let mut logits = pre * w;
            add_to_rows(&mut logits, head.bias.as_slice(), 1.0);
            Ok(logits)
        }
        Some(proj) => projected_logits(&mean, noise, proj),
    }
}

/// `1 μᵀ + ε·P` for an explicit projection. This is the hashed-space formula
/// with an arbitrary Q×K matrix in place of the bucket matrix.
pub fn projected_logits(mean: &DVector<f64>, noise: &DMatrix<f64>, proj: Projection<'_>) -> Result<DMatrix<f64>> {
    let q = noise.ncols();
    let expected = match proj {
        Projection::Identity => mean.len(),
        Projection::Dense(m) => m.nrows(),
        Projection::Buckets(map) => map.num_buckets(),
    };
    dim_check(q == expected, || format!("noise has {q} columns, projection expects {expected}"))?;
    dim_check(proj.output_dim(q) == mean.len(), || "projection output does not match K".into())?;
    let mut logits = proj.apply_rows(noise);
    add_to_rows(&mut logits, mean.as_slice(), 1.0);
    Ok(logits)
}

/// Adds `sign·v` to every row, walking the column-major storage in order.
pub(crate) fn add_to_rows(m: &mut DMatrix<f64>, v: &[f64], sign: f64) {
    for (mut col, &x) in m.column_iter_mut().zip(v) {
        col.add_scalar_mut(sign * x);
    }
}

pub(crate) fn broadcast_rows(v: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, v.len(), |_, j| v[j])
}
