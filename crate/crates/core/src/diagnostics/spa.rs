use nalgebra::{DMatrix, DVector};

use crate::covariance::{factor_matrix, NoiseSpace};
use crate::error::{dim_check, Error, Result};
use crate::sampling::Head;

/// Relative singular-value cutoff of the rank decision.
const RANK_TOL: f64 = 1e-10;

/// Orthonormal basis of the row space of `m`, one basis vector per row.
pub fn row_space_basis(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().all(|&x| x == 0.0) {
        return Err(Error::InvalidArgument("row space of a zero matrix".into()));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let svd = m.clone().svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors were requested");
    let sigma_max = svd.singular_values.max();
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > RANK_TOL * sigma_max)
        .collect();
    Ok(v_t.select_rows(&keep))
}

/// Cosine of the smallest principal angle between the row spaces of `a`
/// (D×K) and `b` (R×K).
pub fn spa_cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    dim_check(a.ncols() == b.ncols(), || format!("row lengths differ: {} vs {}", a.ncols(), b.ncols()))?;
    dim_check(a.ncols() >= a.nrows().max(b.nrows()), || {
        format!("K = {} is smaller than the row counts {} and {}", a.ncols(), a.nrows(), b.nrows())
    })?;
    let qa = row_space_basis(a)?;
    let qb = row_space_basis(b)?;
    let cross = &qa * qb.transpose();
    Ok(cross.singular_values().max())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpaProfile {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single input.
    pub std: f64,
    pub values: Vec<f64>,
}

/// `spa_cosine(Wᵀ, V(x))` over the rows of `inputs` for a logit-space head.
pub fn spa_profile(head: &Head, inputs: &DMatrix<f64>) -> Result<SpaProfile> {
    let spec = head
        .covariance
        .as_ref()
        .filter(|s| matches!(s.space, NoiseSpace::Logit))
        .ok_or_else(|| Error::InvalidArgument("SPA needs a logit-space heteroscedastic head".into()))?;
    if inputs.nrows() == 0 {
        return Err(Error::InvalidArgument("SPA profile over zero inputs".into()));
    }
    let w_rows = head.weights.clone();
    let values = inputs
        .row_iter()
        .map(|x| {
            let phi: DVector<f64> = x.transpose();
            spa_cosine(&w_rows, &factor_matrix(spec, &phi)?.factors)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(SpaProfile { mean, std, values })
}
