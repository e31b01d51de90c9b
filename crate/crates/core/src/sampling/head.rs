use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariance::{hash_bucket_map, CovarianceSpec, Dims, HeadKind, NoiseSpace, Projection, Tail};
use crate::error::{dim_check, Error, Result};
use crate::rng::RngStream;
use crate::training::TemperatureParam;

/// Output link applied to (tempered) logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Softmax,
    Sigmoid,
}

/// How the predictive expectation over the noise is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    MonteCarlo { samples: usize },
    MeanField {
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Deterministic,
}

fn default_lambda() -> f64 {
    crate::meanfield::LAMBDA_PI_OVER_8
}

/// A linear classification head with optional heteroscedastic noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `W`, D×K.
    pub weights: DMatrix<f64>,
    /// `b`, K.
    pub bias: DVector<f64>,
    /// `None` for a deterministic head.
    pub covariance: Option<CovarianceSpec>,
    pub temperature: TemperatureParam,
}

/// Scale of the random initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScale {
    pub weights: f64,
    pub factors: f64,
    pub kernels: f64,
    pub scale_bias: f64,
    pub tail_bias: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        Self {
            weights: 0.1,
            factors: 0.5,
            kernels: 0.05,
            scale_bias: 1.0,
            tail_bias: 0.5,
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    // Column-major fill order is part of the reproducibility contract.
    DMatrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

impl Head {
    pub fn deterministic(weights: DMatrix<f64>, bias: DVector<f64>, temperature: TemperatureParam) -> Result<Self> {
        let head = Self {
            weights,
            bias,
            covariance: None,
            temperature,
        };
        head.validate()?;
        Ok(head)
    }

    pub fn kind(&self) -> HeadKind {
        self.covariance.as_ref().map_or(HeadKind::Det, |c| c.space.kind())
    }

    pub fn pre_logit_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    pub fn tau(&self) -> f64 {
        self.temperature.value()
    }

    pub fn projection(&self) -> Option<Projection<'_>> {
        self.covariance
            .as_ref()
            .map(|c| Projection::for_space(&c.space, &self.weights))
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = self.weights.shape();
        dim_check(self.bias.len() == k, || format!("bias has length {}, expected {k}", self.bias.len()))?;
        self.temperature.validate()?;
        if let Some(spec) = &self.covariance {
            spec.validate()?;
            dim_check(spec.pre_logit_dim() == d, || {
                format!("covariance kernels expect D = {}, W has D = {d}", spec.pre_logit_dim())
            })?;
            let q = spec.noise_dim();
            match &spec.space {
                NoiseSpace::Logit => dim_check(q == k, || format!("logit-space noise dim {q} ≠ K = {k}"))?,
                NoiseSpace::PreLogit => dim_check(q == d, || format!("pre-logit noise dim {q} ≠ D = {d}"))?,
                NoiseSpace::Hashed(map) => dim_check(map.num_classes() == k, || {
                    format!("bucket map covers {} classes, K = {k}", map.num_classes())
                })?,
            }
        }
        Ok(())
    }

    /// Mean logits `Wᵀφ + b`.
    pub fn mean_logits(&self, phi: &DVector<f64>) -> Result<DVector<f64>> {
        dim_check(phi.len() == self.pre_logit_dim(), || {
            format!("input has length {}, head expects {}", phi.len(), self.pre_logit_dim())
        })?;
        Ok(self.weights.tr_mul(phi) + &self.bias)
    }

    /// Random head of the requested family.
    pub fn random(
        kind: HeadKind,
        dims: &Dims,
        tail: Tail,
        temperature: TemperatureParam,
        scale: InitScale,
        rng: &RngStream,
    ) -> Result<Self> {
        dims.validate()?;
        let mut g = rng.generator();
        let (d, k, r) = (dims.pre_logit_dim, dims.num_classes, dims.num_factors);
        let weights = gaussian_matrix(d, k, scale.weights, &mut g);
        let bias = DVector::zeros(k);
        let covariance = match kind {
            HeadKind::Det => None,
            _ => {
                let q = dims.noise_dim(kind)?;
                let space = match kind {
                    HeadKind::Het => NoiseSpace::Logit,
                    HeadKind::HetXl => NoiseSpace::PreLogit,
                    _ => NoiseSpace::Hashed(hash_bucket_map(k, q, rng.seed ^ rng.stream)?),
                };
                Some(CovarianceSpec {
                    space,
                    tail,
                    factors: gaussian_matrix(r, q, scale.factors, &mut g),
                    scale_kernel: gaussian_matrix(d, q, scale.kernels, &mut g),
                    scale_bias: DVector::from_element(q, scale.scale_bias),
                    tail_kernel: gaussian_matrix(d, q, scale.kernels, &mut g),
                    tail_bias: DVector::from_element(q, scale.tail_bias),
                })
            }
        };
        let head = Self {
            weights,
            bias,
            covariance,
            temperature,
        };
        head.validate()?;
        Ok(head)
    }

    /// Visits every trainable tensor in a fixed order: W, b, J, K_het, b_het,
    /// K_diag, b_diag. The temperature is handled separately.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&'static str, &mut [f64])) {
        f("W", self.weights.as_mut_slice());
        f("b", self.bias.as_mut_slice());
        if let Some(spec) = &mut self.covariance {
            f("J", spec.factors.as_mut_slice());
            f("K_het", spec.scale_kernel.as_mut_slice());
            f("b_het", spec.scale_bias.as_mut_slice());
            f("K_diag", spec.tail_kernel.as_mut_slice());
            f("b_diag", spec.tail_bias.as_mut_slice());
        }
    }

    /// Flattened trainable tensors (excluding the temperature).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.clone().for_each_tensor_mut(|_, s| out.extend_from_slice(s));
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        let mut ok = true;
        self.for_each_tensor_mut(|_, s| {
            if offset + s.len() <= values.len() {
                s.copy_from_slice(&values[offset..offset + s.len()]);
            } else {
                ok = false;
            }
            offset += s.len();
        });
        if !ok || offset != values.len() {
            return Err(Error::Dimension(format!(
                "flat parameter vector has length {}, head has {offset}",
                values.len()
            )));
        }
        Ok(())
    }
}
