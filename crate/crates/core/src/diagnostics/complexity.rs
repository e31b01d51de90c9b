use serde::{Deserialize, Serialize};

use crate::covariance::HeadKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostDims {
    pub pre_logit_dim: u64,
    pub num_classes: u64,
    pub num_factors: u64,
    pub samples: u64,
}

/// Which cost expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModel {
    /// HET `DK + KRS`, HET-XL `DRS + D² + DKS`.
    Dominating,
    /// Every counted term: HET `3DK + 3KS + KRS`, HET-XL
    /// `2D² + 3DS + DRS + DKS`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostTerms {
    pub dominating: f64,
    pub full: f64,
}

impl CostTerms {
    pub fn get(&self, model: CostModel) -> f64 {
        match model {
            CostModel::Dominating => self.dominating,
            CostModel::Full => self.full,
        }
    }
}

/// Analytic per-example cost of an MC forward pass.
pub fn complexity_terms(kind: HeadKind, dims: &CostDims) -> Result<CostTerms> {
    let d = dims.pre_logit_dim as f64;
    let k = dims.num_classes as f64;
    let r = dims.num_factors as f64;
    let s = dims.samples as f64;
    match kind {
        HeadKind::Het => Ok(CostTerms {
            dominating: d * k + k * r * s,
            full: 3.0 * d * k + 3.0 * k * s + k * r * s,
        }),
        HeadKind::HetXl => Ok(CostTerms {
            dominating: d * r * s + d * d + d * k * s,
            full: 2.0 * d * d + 3.0 * d * s + d * r * s + d * k * s,
        }),
        other => Err(Error::InvalidArgument(format!("no cost model for {}", other.name()))),
    }
}

/// Sample count at which HET and HET-XL costs are equal. Both costs are
/// affine in `S`, so the root is unique when it exists.
pub fn crossover_samples(pre_logit_dim: u64, num_classes: u64, num_factors: u64, model: CostModel) -> Result<Option<f64>> {
    let at = |samples| -> Result<f64> {
        let dims = CostDims { pre_logit_dim, num_classes, num_factors, samples };
        Ok(complexity_terms(HeadKind::Het, &dims)?.get(model) - complexity_terms(HeadKind::HetXl, &dims)?.get(model))
    };
    let f0 = at(0)?;
    let slope = at(1)? - f0;
    if slope == 0.0 {
        return Ok(None);
    }
    let root = -f0 / slope;
    Ok((root > 0.0).then_some(root))
}
