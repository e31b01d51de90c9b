use nalgebra::DMatrix;

use crate::error::{dim_check, Error, Result};
use crate::math::argmax;
use crate::sampling::{Link, PredictiveBatch};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Negative log-likelihood of one example and its gradient with respect to the
/// predicted probabilities. Clamped entries get a zero gradient.
pub(crate) fn example_nll(probs: &[f64], labels: &[f64], link: Link, grad: Option<&mut [f64]>) -> f64 {
    let mut loss = 0.0;
    let mut g_buf;
    let g: &mut [f64] = match grad {
        Some(g) => g,
        None => {
            g_buf = vec![0.0; probs.len()];
            &mut g_buf
        }
    };
    for j in 0..probs.len() {
        let (p, y) = (probs[j], labels[j]);
        g[j] = 0.0;
        if y != 0.0 {
            loss -= y * p.max(PROB_FLOOR).ln();
            if p > PROB_FLOOR {
                g[j] -= y / p;
            }
        }
        if link == Link::Sigmoid && y != 1.0 {
            let q = 1.0 - p;
            loss -= (1.0 - y) * q.max(PROB_FLOOR).ln();
            if q > PROB_FLOOR {
                g[j] += (1.0 - y) / q;
            }
        }
    }
    loss
}

/// Mean negative log-likelihood. Softmax expects one-hot rows, sigmoid
/// multi-hot rows (summing the per-class binary terms).
pub fn nll(batch: &PredictiveBatch, labels: &DMatrix<f64>) -> Result<f64> {
    dim_check(batch.probs.shape() == labels.shape(), || {
        format!("probabilities {:?} vs labels {:?}", batch.probs.shape(), labels.shape())
    })?;
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let k = labels.ncols();
    let mut total = 0.0;
    let mut p = vec![0.0; k];
    let mut y = vec![0.0; k];
    for n in 0..labels.nrows() {
        for j in 0..k {
            p[j] = batch.probs[(n, j)];
            y[j] = labels[(n, j)];
        }
        if p.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN probability for example {n}")));
        }
        total += example_nll(&p, &y, batch.link, None);
    }
    Ok(total / labels.nrows() as f64)
}

/// Fraction of examples whose most probable class (lowest index on ties) is
/// labeled positive.
pub fn precision_at_1(probs: &DMatrix<f64>, labels: &DMatrix<f64>) -> Result<f64> {
    dim_check(probs.shape() == labels.shape(), || {
        format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape())
    })?;
    if probs.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let hits = (0..probs.nrows())
        .filter(|&n| labels[(n, argmax(probs.row(n).iter().copied()))] > 0.0)
        .count();
    Ok(hits as f64 / probs.nrows() as f64)
}
