//! Closed-form mean-field approximations of sigmoid- and softmax-Gaussian
//! integrals, and a Gauss-Hermite quadrature oracle.
//!
//! For `u ~ N(μ, s²)`:
//!
//! ```text
//! E[sigmoid(u/τ)]        ≈ sigmoid(μ / √(τ² + λ s²))
//! E[softmax(u/τ)]_j      ≈ softmax(μ / √(τ² + λ s_j²))_j
//! ```
//!
//! The softmax form only uses the diagonal variances `s_j²` (the "mf0" variant);
//! every coordinate `j` gets its own denominator.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{factor_matrix, variances_from_factors};
use crate::error::{dim_check, Error, Result};
use crate::math::{sigmoid, softmax_into};
use crate::sampling::{Estimator, Head, Link, PredictiveBatch};

/// `λ = π/8`, matching the probit slope at the origin.
pub const LAMBDA_PI_OVER_8: f64 = PI / 8.0;
/// `λ = 3/π²`, matching the variance of the logistic distribution.
pub const LAMBDA_THREE_OVER_PI_SQ: f64 = 3.0 / (PI * PI);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeanFieldConfig {
    pub lambda: f64,
    /// Gauss-Hermite nodes for the quadrature oracle.
    pub quadrature_nodes: usize,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            lambda: LAMBDA_PI_OVER_8,
            quadrature_nodes: 200,
        }
    }
}

impl MeanFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("λ must be positive, got {}", self.lambda)));
        }
        if self.quadrature_nodes < 20 {
            return Err(Error::InvalidArgument("quadrature needs at least 20 nodes".into()));
        }
        Ok(())
    }
}

fn check_scalar_args(s2: f64, tau: f64) -> Result<()> {
    if !(s2 >= 0.0) {
        return Err(Error::InvalidArgument(format!("variance must be non-negative, got {s2}")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn mf_sigmoid(mu: f64, s2: f64, tau: f64, lambda: f64) -> Result<f64> {
    check_scalar_args(s2, tau)?;
    Ok(sigmoid(mu / (tau * tau + lambda * s2).sqrt()))
}

pub fn mf_softmax(mu: &[f64], s2: &[f64], tau: f64, lambda: f64) -> Result<Vec<f64>> {
    dim_check(mu.len() == s2.len(), || {
        format!("{} means but {} variances", mu.len(), s2.len())
    })?;
    for &v in s2 {
        check_scalar_args(v, tau)?;
    }
    let scaled: Vec<f64> = mu
        .iter()
        .zip(s2)
        .map(|(&m, &v)| m / (tau * tau + lambda * v).sqrt())
        .collect();
    let mut out = vec![0.0; mu.len()];
    softmax_into(&scaled, &mut out);
    Ok(out)
}

/// Mean logits and logit variances of every example (zero variances for a
/// deterministic head).
pub(crate) fn logit_mean_and_variances(head: &Head, phi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let mean = head.mean_logits(phi)?;
    let s2 = match (&head.covariance, head.projection()) {
        (Some(spec), Some(proj)) => variances_from_factors(&factor_matrix(spec, phi)?, proj),
        _ => DVector::zeros(head.num_classes()),
    };
    Ok((mean, s2))
}

pub fn mf_predict(head: &Head, phis: &DMatrix<f64>, link: Link, lambda: f64) -> Result<PredictiveBatch> {
    head.validate()?;
    dim_check(phis.ncols() == head.pre_logit_dim(), || {
        format!("inputs have {} columns, head expects D = {}", phis.ncols(), head.pre_logit_dim())
    })?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
    }
    let tau = head.tau();
    let k = head.num_classes();
    let mut probs = DMatrix::zeros(phis.nrows(), k);
    for n in 0..phis.nrows() {
        let (mean, s2) = logit_mean_and_variances(head, &phis.row(n).transpose())?;
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logits for example {n}")));
        }
        match link {
            Link::Sigmoid => {
                for j in 0..k {
                    probs[(n, j)] = mf_sigmoid(mean[j], s2[j], tau, lambda)?;
                }
            }
            Link::Softmax => {
                let p = mf_softmax(mean.as_slice(), s2.as_slice(), tau, lambda)?;
                for j in 0..k {
                    probs[(n, j)] = p[j];
                }
            }
        }
    }
    Ok(PredictiveBatch {
        probs,
        link,
        estimator: Estimator::MeanField { lambda },
    })
}

/// Gauss-Hermite rule for `∫ e^{-x²} f(x) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Nodes start from the eigenvalues of the Jacobi matrix and are polished
    /// by Newton iteration on the orthonormal Hermite recurrence, carried with
    /// the factor `e^{-z²/2}` so that large `n` does not overflow.
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        const PI_M4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
        let nf = n as f64;
        let jacobi = DMatrix::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64 / 2.0).sqrt()
            } else {
                0.0
            }
        });
        let mut start: Vec<f64> = jacobi.symmetric_eigenvalues().iter().copied().collect();
        start.sort_by(|a, b| b.total_cmp(a));
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut z = start[i];
            let mut pp = 0.0;
            for _ in 0..50 {
                let mut p1 = PI_M4 * (-0.5 * z * z).exp();
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let step = p1 / pp;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            nodes[i] = z;
            nodes[n - 1 - i] = -z;
            weights[i] = 2.0 * (-z * z).exp() / (pp * pp);
            weights[n - 1 - i] = weights[i];
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(Self { nodes, weights })
    }

    /// `E[f(U)]` for `U ~ N(mu, s2)`.
    pub fn gaussian_expectation(&self, mu: f64, s2: f64, f: impl Fn(f64) -> f64) -> f64 {
        let scale = (2.0 * s2).sqrt();
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(mu + scale * x))
            .sum();
        total / PI.sqrt()
    }
}

fn cached_rule(nodes: usize) -> Result<Arc<GaussHermite>> {
    static RULES: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let mut rules = RULES.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(rule) = rules.get(&nodes) {
        return Ok(rule.clone());
    }
    let rule = Arc::new(GaussHermite::new(nodes)?);
    rules.insert(nodes, rule.clone());
    Ok(rule)
}

/// Quadrature estimate of `∫ sigmoid(u/τ) N(u; μ, s²) du`.
pub fn gauss_hermite_sigmoid(mu: f64, s2: f64, tau: f64, nodes: usize) -> Result<f64> {
    check_scalar_args(s2, tau)?;
    if nodes < 20 {
        return Err(Error::InvalidArgument("quadrature needs at least 20 nodes".into()));
    }
    let rule = cached_rule(nodes)?;
    Ok(rule.gaussian_expectation(mu, s2, |u| sigmoid(u / tau)))
}
