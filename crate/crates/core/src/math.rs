//! Scalar and row-wise link helpers shared by the estimators.

use nalgebra::DMatrix;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable softmax of `row` written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

/// Applies softmax to every row of `m` in place.
pub fn softmax_rows(m: &mut DMatrix<f64>) {
    let cols = m.ncols();
    let mut row = vec![0.0; cols];
    let mut out = vec![0.0; cols];
    for i in 0..m.nrows() {
        for j in 0..cols {
            row[j] = m[(i, j)];
        }
        softmax_into(&row, &mut out);
        for j in 0..cols {
            m[(i, j)] = out[j];
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}
