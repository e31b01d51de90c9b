//! Batched training loss with hand-derived pathwise gradients.
//!
//! Monte-Carlo losses reuse the reparametrized draws of `rng.split(n)` for
//! example `n`, so for a fixed stream the loss is a deterministic,
//! differentiable function of every parameter (common random numbers).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::covariance::{Projection, Tail};
use crate::datagen::Dataset;
use crate::error::{dim_check, Error, Result};
use crate::math::{sigmoid, softmax_into, softplus};
use crate::rng::RngStream;
use crate::sampling::{add_to_rows, tail_width, Estimator, Head, Link, StandardDraws};
use crate::training::TemperatureParam;

use super::loss::example_nll;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceGradients {
    pub factors: DMatrix<f64>,
    pub scale_kernel: DMatrix<f64>,
    pub scale_bias: DVector<f64>,
    pub tail_kernel: DMatrix<f64>,
    pub tail_bias: DVector<f64>,
}

/// Gradients of the mean batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub covariance: Option<CovarianceGradients>,
    /// `∂L/∂τ` at fixed parameters.
    pub tau: f64,
    /// `∂L/∂t`; zero for a fixed temperature.
    pub t: f64,
}

impl HeadGradients {
    /// Same order as [`Head::for_each_tensor_mut`].
    pub fn for_each_tensor(&self, mut f: impl FnMut(&'static str, &[f64])) {
        f("W", self.weights.as_slice());
        f("b", self.bias.as_slice());
        if let Some(c) = &self.covariance {
            f("J", c.factors.as_slice());
            f("K_het", c.scale_kernel.as_slice());
            f("b_het", c.scale_bias.as_slice());
            f("K_diag", c.tail_kernel.as_slice());
            f("b_diag", c.tail_bias.as_slice());
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.for_each_tensor(|_, s| out.extend_from_slice(s));
        out
    }

    fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.for_each_tensor(|name, s| {
            if bad.is_none() && s.iter().any(|x| !x.is_finite()) {
                bad = Some(name);
            }
        });
        if bad.is_none() && !(self.tau.is_finite() && self.t.is_finite()) {
            bad = Some("t");
        }
        match bad {
            Some(name) => Err(Error::Numeric(format!("non-finite gradient for tensor {name}"))),
            None => Ok(()),
        }
    }
}

/// Result of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    /// Predicted probabilities, B×K.
    pub probs: DMatrix<f64>,
    pub grads: HeadGradients,
}

/// Loss and gradients of the batch under `estimator`.
pub fn loss_and_grad(head: &Head, batch: &Dataset, estimator: Estimator, link: Link, rng: &RngStream) -> Result<LossEval> {
    let eval = evaluate_at_tau(head, batch, estimator, link, rng, head.tau())?;
    eval.grads.check_finite()?;
    Ok(eval)
}

fn rows_plus(mut m: DMatrix<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    add_to_rows(&mut m, v.as_slice(), 1.0);
    m
}

fn col_sums(m: &DMatrix<f64>) -> DVector<f64> {
    m.row_sum().transpose()
}

/// Writes `Jᵀ g` for the link Jacobian at `p` into `out`, scaled by `scale`.
fn link_backward(p: &[f64], g: &[f64], link: Link, scale: f64, out: &mut [f64]) {
    match link {
        Link::Softmax => {
            let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
            for j in 0..p.len() {
                out[j] = scale * p[j] * (g[j] - dot);
            }
        }
        Link::Sigmoid => {
            for j in 0..p.len() {
                out[j] = scale * g[j] * p[j] * (1.0 - p[j]);
            }
        }
    }
}

fn link_forward(a: &[f64], link: Link, out: &mut [f64]) {
    match link {
        Link::Softmax => softmax_into(a, out),
        Link::Sigmoid => {
            for (o, &x) in out.iter_mut().zip(a) {
                *o = sigmoid(x);
            }
        }
    }
}

/// Loss gradient with respect to the mean probabilities, one row per example,
/// already divided by the batch size.
fn prob_gradients(probs: &DMatrix<f64>, labels: &DMatrix<f64>, link: Link) -> Result<(f64, DMatrix<f64>)> {
    let (b, k) = probs.shape();
    let mut gp = DMatrix::zeros(b, k);
    let mut total = 0.0;
    let mut p = vec![0.0; k];
    let mut y = vec![0.0; k];
    let mut g = vec![0.0; k];
    for n in 0..b {
        for j in 0..k {
            p[j] = probs[(n, j)];
            y[j] = labels[(n, j)];
        }
        if p.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("NaN probability for example {n}")));
        }
        total += example_nll(&p, &y, link, Some(&mut g));
        for j in 0..k {
            gp[(n, j)] = g[j] / b as f64;
        }
    }
    Ok((total / b as f64, gp))
}

/// Loss and gradients with the temperature replaced by `tau`.
///
/// `grads.tau` is the partial derivative in `τ`; `grads.t` chains it through
/// the head's parametrization when the temperature is learned.
pub(crate) fn evaluate_at_tau(
    head: &Head,
    batch: &Dataset,
    estimator: Estimator,
    link: Link,
    rng: &RngStream,
    tau: f64,
) -> Result<LossEval> {
    head.validate()?;
    let x = &batch.features;
    let y = &batch.labels;
    dim_check(x.ncols() == head.pre_logit_dim(), || {
        format!("features have {} columns, head expects D = {}", x.ncols(), head.pre_logit_dim())
    })?;
    dim_check(y.nrows() == x.nrows() && y.ncols() == head.num_classes(), || {
        format!("labels are {:?}, expected ({}, {})", y.shape(), x.nrows(), head.num_classes())
    })?;
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let mean = rows_plus(x * &head.weights, &head.bias);
    if mean.iter().any(|m| !m.is_finite()) {
        let n = (0..mean.nrows()).find(|&n| mean.row(n).iter().any(|m| !m.is_finite())).unwrap_or(0);
        return Err(Error::Numeric(format!("non-finite logits for example {n}")));
    }
    let mut eval = match (&head.covariance, estimator) {
        (Some(_), Estimator::MonteCarlo { samples }) => {
            if samples == 0 {
                return Err(Error::InvalidArgument("at least one MC sample is required".into()));
            }
            monte_carlo(head, x, y, &mean, samples, link, rng, tau)?
        }
        (Some(_), Estimator::MeanField { lambda }) => {
            if !(lambda > 0.0) {
                return Err(Error::InvalidArgument(format!("λ must be positive, got {lambda}")));
            }
            mean_field(head, x, y, &mean, lambda, link, tau)?
        }
        _ => deterministic(head, x, y, &mean, link, tau)?,
    };
    eval.grads.t = match head.temperature {
        TemperatureParam::Learned(temp) => eval.grads.tau * temp.derivative(),
        TemperatureParam::Fixed(_) => 0.0,
    };
    Ok(eval)
}

fn zero_cov_grads(head: &Head) -> Option<CovarianceGradients> {
    head.covariance.as_ref().map(|c| CovarianceGradients {
        factors: DMatrix::zeros(c.factors.nrows(), c.factors.ncols()),
        scale_kernel: DMatrix::zeros(c.scale_kernel.nrows(), c.scale_kernel.ncols()),
        scale_bias: DVector::zeros(c.scale_bias.len()),
        tail_kernel: DMatrix::zeros(c.tail_kernel.nrows(), c.tail_kernel.ncols()),
        tail_bias: DVector::zeros(c.tail_bias.len()),
    })
}

fn deterministic(head: &Head, x: &DMatrix<f64>, y: &DMatrix<f64>, mean: &DMatrix<f64>, link: Link, tau: f64) -> Result<LossEval> {
    let (b, k) = mean.shape();
    let mut probs = DMatrix::zeros(b, k);
    let mut a = vec![0.0; k];
    let mut p = vec![0.0; k];
    for n in 0..b {
        for j in 0..k {
            a[j] = mean[(n, j)] / tau;
        }
        link_forward(&a, link, &mut p);
        for j in 0..k {
            probs[(n, j)] = p[j];
        }
    }
    let (loss, gp) = prob_gradients(&probs, y, link)?;
    let mut g_mean = DMatrix::zeros(b, k);
    let mut g_tau = 0.0;
    let mut g = vec![0.0; k];
    let mut ga = vec![0.0; k];
    for n in 0..b {
        for j in 0..k {
            p[j] = probs[(n, j)];
            g[j] = gp[(n, j)];
        }
        link_backward(&p, &g, link, 1.0, &mut ga);
        for j in 0..k {
            g_mean[(n, j)] = ga[j] / tau;
            g_tau -= ga[j] * mean[(n, j)] / (tau * tau);
        }
    }
    Ok(LossEval {
        loss,
        probs,
        grads: HeadGradients {
            weights: x.tr_mul(&g_mean),
            bias: col_sums(&g_mean),
            covariance: zero_cov_grads(head),
            tau: g_tau,
            t: 0.0,
        },
    })
}

/// Q×K matrix with squared entries, for diagonal-tail variances under a dense
/// projection.
fn squared(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| v * v)
}

/// Per-example pieces of the MC loss, summed in example order.
struct McPartial {
    loss: f64,
    tau: f64,
    probs: Vec<f64>,
    g_mean: Vec<f64>,
    g_scale: Vec<f64>,
    g_tail: Vec<f64>,
    /// `noiseᵀ·g_logits`, Q×K; only for a dense projection.
    g_proj: Option<DMatrix<f64>>,
    /// R×Q.
    g_factors: DMatrix<f64>,
}

/// Examples per parallel work item. The reduction order is fixed, so results
/// do not depend on the thread count.
const MC_CHUNK: usize = 8;

#[allow(clippy::too_many_arguments)]
fn monte_carlo(
    head: &Head,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mean: &DMatrix<f64>,
    samples: usize,
    link: Link,
    rng: &RngStream,
    tau: f64,
) -> Result<LossEval> {
    let spec = head.covariance.as_ref().expect("covariance present");
    let proj = head.projection().expect("covariance present");
    let (b, k) = mean.shape();
    let q = spec.noise_dim();
    let r = spec.num_factors();

    let scale = rows_plus(x * &spec.scale_kernel, &spec.scale_bias);
    let pre_tail = rows_plus(x * &spec.tail_kernel, &spec.tail_bias);
    let tail = match spec.tail {
        Tail::RankOne => pre_tail.clone(),
        Tail::Diagonal => pre_tail.map(softplus),
    };

    // nalgebra's `tr_mul` is a loop of dot products; explicit transposes
    // let the products below go through its blocked kernel.
    let factors_t = spec.factors.transpose();
    let weights_t = match proj {
        Projection::Dense(w) => Some(w.transpose()),
        _ => None,
    };
    let chunks: Vec<Result<Vec<McPartial>>> = (0..b.div_ceil(MC_CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * MC_CHUNK..((c + 1) * MC_CHUNK).min(b))
                .map(|n| {
                    let ex = McExample {
                        factors_t: &factors_t,
                        weights_t: weights_t.as_ref(),
                        weight: 1.0 / b as f64,
                        tail_kind: spec.tail,
                        proj: &proj,
                        scale: scale.row(n).iter().copied().collect(),
                        tail: tail.row(n).iter().copied().collect(),
                        mean: mean.row(n).iter().copied().collect(),
                        labels: y.row(n).iter().copied().collect(),
                    };
                    ex.run(samples, link, &rng.split(n as u64), tau, q, r, k)
                        .map_err(|e| match e {
                            Error::Numeric(_) => Error::Numeric(format!("non-finite logits for example {n}")),
                            other => other,
                        })
                })
                .collect()
        })
        .collect();

    let mut loss = 0.0;
    let mut g_tau = 0.0;
    let mut probs = DMatrix::zeros(b, k);
    let mut g_mean = DMatrix::zeros(b, k);
    let mut g_scale = DMatrix::zeros(b, q);
    let mut g_tail = DMatrix::zeros(b, q);
    let mut g_proj = DMatrix::zeros(q, k);
    let mut g_factors = DMatrix::zeros(r, q);
    let mut n = 0;
    for chunk in chunks {
        for part in chunk? {
            loss += part.loss;
            g_tau += part.tau;
            for j in 0..k {
                probs[(n, j)] = part.probs[j];
                g_mean[(n, j)] = part.g_mean[j];
            }
            for c in 0..q {
                g_scale[(n, c)] = part.g_scale[c];
                g_tail[(n, c)] = part.g_tail[c];
            }
            if let Some(gp) = &part.g_proj {
                g_proj += gp;
            }
            g_factors += &part.g_factors;
            n += 1;
        }
    }
    loss /= b as f64;

    let mut g_weights = x.tr_mul(&g_mean);
    if let Projection::Dense(_) = proj {
        g_weights += g_proj;
    }
    let g_bias = col_sums(&g_mean);
    let g_pre_tail = match spec.tail {
        Tail::RankOne => g_tail,
        Tail::Diagonal => g_tail.zip_map(&pre_tail, |g, pre| g * sigmoid(pre)),
    };

    Ok(LossEval {
        loss,
        probs,
        grads: HeadGradients {
            weights: g_weights,
            bias: g_bias,
            covariance: Some(CovarianceGradients {
                factors: g_factors,
                scale_kernel: x.tr_mul(&g_scale),
                scale_bias: col_sums(&g_scale),
                tail_kernel: x.tr_mul(&g_pre_tail),
                tail_bias: col_sums(&g_pre_tail),
            }),
            tau: g_tau,
            t: 0.0,
        },
    })
}

/// One example of the MC loss. Sample matrices are stored transposed (one
/// column per sample) so the per-sample link runs over contiguous memory.
struct McExample<'a> {
    /// `Jᵀ`, Q×R.
    factors_t: &'a DMatrix<f64>,
    /// `Wᵀ` for a dense projection.
    weights_t: Option<&'a DMatrix<f64>>,
    /// Weight of this example in the batch loss.
    weight: f64,
    tail_kind: Tail,
    proj: &'a Projection<'a>,
    scale: Vec<f64>,
    tail: Vec<f64>,
    mean: Vec<f64>,
    labels: Vec<f64>,
}

impl McExample<'_> {
    #[allow(clippy::too_many_arguments)]
    fn run(&self, samples: usize, link: Link, rng: &RngStream, tau: f64, q: usize, r: usize, k: usize) -> Result<McPartial> {
        let tw = tail_width(self.tail_kind, q);
        let draws = StandardDraws::sample(&mut rng.generator(), samples, r, tw);
        let z_t = draws.factor.transpose();
        let zt_t = draws.tail.transpose();
        // (J ∘ 1vᵀ)ᵀ zᵀ, split so the scale gradient can reuse Jᵀzᵀ.
        let zj_t = self.factors_t * &z_t;
        let sqrt_tail: Vec<f64> = match self.tail_kind {
            Tail::RankOne => self.tail.clone(),
            Tail::Diagonal => self.tail.iter().map(|t| t.sqrt()).collect(),
        };
        let mut noise_t = zj_t.clone();
        for (s, col) in noise_t.as_mut_slice().chunks_mut(q).enumerate() {
            for c in 0..q {
                let zt = match self.tail_kind {
                    Tail::RankOne => zt_t[(0, s)],
                    Tail::Diagonal => zt_t[(c, s)],
                };
                col[c] = col[c] * self.scale[c] + zt * sqrt_tail[c];
            }
        }
        let mut logits_t = match self.proj {
            Projection::Identity => noise_t.clone(),
            Projection::Dense(_) => self.weights_t.expect("dense projection") * &noise_t,
            Projection::Buckets(map) => DMatrix::from_fn(k, samples, |j, s| noise_t[(map.bucket(j), s)]),
        };
        let mut probs = vec![0.0; k];
        let mut sample_probs = DMatrix::zeros(k, samples);
        let mut a = vec![0.0; k];
        let prob_cols = sample_probs.as_mut_slice().chunks_mut(k);
        for (col, p) in logits_t.as_mut_slice().chunks_mut(k).zip(prob_cols) {
            for j in 0..k {
                col[j] += self.mean[j];
                a[j] = col[j] / tau;
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(String::new()));
            }
            link_forward(&a, link, p);
            for j in 0..k {
                probs[j] += p[j];
            }
        }
        for p in probs.iter_mut() {
            *p /= samples as f64;
        }
        if probs.iter().any(|p| p.is_nan()) {
            return Err(Error::Numeric(String::new()));
        }
        let mut gp = vec![0.0; k];
        let loss = example_nll(&probs, &self.labels, link, Some(&mut gp));
        for g in gp.iter_mut() {
            *g *= self.weight;
        }

        let inv_s = 1.0 / samples as f64;
        let mut g_logits_t = DMatrix::zeros(k, samples);
        let mut g_mean = vec![0.0; k];
        let mut g_tau = 0.0;
        let columns = sample_probs.as_slice().chunks(k).zip(logits_t.as_slice().chunks(k));
        for ((p, logit), g) in columns.zip(g_logits_t.as_mut_slice().chunks_mut(k)) {
            link_backward(p, &gp, link, inv_s, g);
            for j in 0..k {
                g_tau -= g[j] * logit[j] / (tau * tau);
                g[j] /= tau;
                g_mean[j] += g[j];
            }
        }

        let (g_noise_t, g_proj) = match self.proj {
            Projection::Identity => (g_logits_t, None),
            Projection::Dense(w) => (*w * &g_logits_t, Some(&noise_t * g_logits_t.transpose())),
            Projection::Buckets(map) => {
                let mut out = DMatrix::zeros(q, samples);
                for s in 0..samples {
                    for j in 0..k {
                        out[(map.bucket(j), s)] += g_logits_t[(j, s)];
                    }
                }
                (out, None)
            }
        };

        let mut g_zj_t = g_noise_t.clone();
        let mut g_scale = vec![0.0; q];
        let mut g_tail = vec![0.0; q];
        let columns = g_noise_t.as_slice().chunks(q).zip(zj_t.as_slice().chunks(q));
        for (s, ((ge, zj), out)) in columns.zip(g_zj_t.as_mut_slice().chunks_mut(q)).enumerate() {
            for c in 0..q {
                out[c] = ge[c] * self.scale[c];
                g_scale[c] += ge[c] * zj[c];
                g_tail[c] += match self.tail_kind {
                    Tail::RankOne => ge[c] * zt_t[(0, s)],
                    Tail::Diagonal => ge[c] * zt_t[(c, s)] / (2.0 * sqrt_tail[c]),
                };
            }
        }
        let g_factors = &z_t * g_zj_t.transpose();
        Ok(McPartial {
            loss,
            tau: g_tau,
            probs,
            g_mean,
            g_scale,
            g_tail,
            g_proj,
            g_factors,
        })
    }
}

fn mean_field(
    head: &Head,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    mean: &DMatrix<f64>,
    lambda: f64,
    link: Link,
    tau: f64,
) -> Result<LossEval> {
    let spec = head.covariance.as_ref().expect("covariance present");
    let proj = head.projection().expect("covariance present");
    let (b, k) = mean.shape();
    let q = spec.noise_dim();
    let r = spec.num_factors();
    let j_mat = &spec.factors;

    let scale = rows_plus(x * &spec.scale_kernel, &spec.scale_bias);
    let pre_tail = rows_plus(x * &spec.tail_kernel, &spec.tail_bias);
    let tail = match spec.tail {
        Tail::RankOne => pre_tail.clone(),
        Tail::Diagonal => pre_tail.map(softplus),
    };

    // Stacked per-example factor rows V_n = J ∘ (1 v_nᵀ), (B·R)×Q.
    let mut factors = DMatrix::zeros(b * r, q);
    for n in 0..b {
        for f in 0..r {
            for c in 0..q {
                factors[(n * r + f, c)] = j_mat[(f, c)] * scale[(n, c)];
            }
        }
    }
    let projected = proj.apply_rows(&factors);
    let mut var = DMatrix::zeros(b, k);
    for n in 0..b {
        for f in 0..r {
            for jj in 0..k {
                let u = projected[(n * r + f, jj)];
                var[(n, jj)] += u * u;
            }
        }
    }
    let dense_sq = match proj {
        Projection::Dense(w) => Some(squared(w)),
        _ => None,
    };
    let projected_tail = match spec.tail {
        Tail::RankOne => {
            let t = proj.apply_rows(&tail);
            var += t.map(|v| v * v);
            Some(t)
        }
        Tail::Diagonal => {
            let contrib = match &dense_sq {
                Some(sq) => &tail * sq,
                None => proj.apply_rows(&tail),
            };
            var += contrib;
            None
        }
    };

    let denom = var.map(|s2| (tau * tau + lambda * s2).sqrt());
    let mut probs = DMatrix::zeros(b, k);
    let mut a = vec![0.0; k];
    let mut p = vec![0.0; k];
    for n in 0..b {
        for jj in 0..k {
            a[jj] = mean[(n, jj)] / denom[(n, jj)];
        }
        link_forward(&a, link, &mut p);
        for jj in 0..k {
            probs[(n, jj)] = p[jj];
        }
    }
    let (loss, gp) = prob_gradients(&probs, y, link)?;

    let mut g_mean = DMatrix::zeros(b, k);
    let mut g_var = DMatrix::zeros(b, k);
    let mut g_tau = 0.0;
    let mut g = vec![0.0; k];
    let mut ga = vec![0.0; k];
    for n in 0..b {
        for jj in 0..k {
            p[jj] = probs[(n, jj)];
            g[jj] = gp[(n, jj)];
        }
        link_backward(&p, &g, link, 1.0, &mut ga);
        for jj in 0..k {
            let den = denom[(n, jj)];
            let mu = mean[(n, jj)];
            let cube = den * den * den;
            g_mean[(n, jj)] = ga[jj] / den;
            g_var[(n, jj)] = -0.5 * lambda * ga[jj] * mu / cube;
            g_tau -= ga[jj] * mu * tau / cube;
        }
    }

    let mut g_weights = x.tr_mul(&g_mean);
    let g_bias = col_sums(&g_mean);

    let mut g_projected = DMatrix::zeros(b * r, k);
    for n in 0..b {
        for f in 0..r {
            for jj in 0..k {
                g_projected[(n * r + f, jj)] = 2.0 * projected[(n * r + f, jj)] * g_var[(n, jj)];
            }
        }
    }
    let g_factors_rows = proj.adjoint_rows(&g_projected, q);
    if let Projection::Dense(_) = proj {
        g_weights += factors.tr_mul(&g_projected);
    }

    let mut g_j = DMatrix::zeros(r, q);
    let mut g_scale = DMatrix::zeros(b, q);
    for n in 0..b {
        for f in 0..r {
            for c in 0..q {
                let gv = g_factors_rows[(n * r + f, c)];
                g_j[(f, c)] += gv * scale[(n, c)];
                g_scale[(n, c)] += gv * j_mat[(f, c)];
            }
        }
    }

    let g_tail = match spec.tail {
        Tail::RankOne => {
            let t = projected_tail.as_ref().expect("rank-one tail");
            let g_t = t.zip_map(&g_var, |tv, gv| 2.0 * tv * gv);
            if let Projection::Dense(_) = proj {
                g_weights += tail.tr_mul(&g_t);
            }
            proj.adjoint_rows(&g_t, q)
        }
        Tail::Diagonal => match (&dense_sq, proj) {
            (Some(sq), Projection::Dense(w)) => {
                let cross = tail.tr_mul(&g_var);
                g_weights += cross.zip_map(w, |c, wv| 2.0 * c * wv);
                &g_var * sq.transpose()
            }
            _ => proj.adjoint_rows(&g_var, q),
        },
    };
    let g_pre_tail = match spec.tail {
        Tail::RankOne => g_tail,
        Tail::Diagonal => g_tail.zip_map(&pre_tail, |g, pre| g * sigmoid(pre)),
    };

    Ok(LossEval {
        loss,
        probs,
        grads: HeadGradients {
            weights: g_weights,
            bias: g_bias,
            covariance: Some(CovarianceGradients {
                factors: g_j,
                scale_kernel: x.tr_mul(&g_scale),
                scale_bias: col_sums(&g_scale),
                tail_kernel: x.tr_mul(&g_pre_tail),
                tail_bias: col_sums(&g_pre_tail),
            }),
            tau: g_tau,
            t: 0.0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::{Dims, HeadKind};
    use crate::meanfield::LAMBDA_PI_OVER_8;
    use crate::sampling::InitScale;
    use crate::training::{Temperature, TemperatureParam};
    use nalgebra::dmatrix;
    use rand::Rng;

    fn batch(d: usize, k: usize, n: usize, link: Link, seed: u64) -> Dataset {
        let mut g = RngStream::new(seed).generator();
        let features = DMatrix::from_fn(n, d, |_, _| g.random::<f64>() * 2.0 - 1.0);
        let labels = DMatrix::from_fn(n, k, |i, j| match link {
            Link::Softmax => f64::from(j == (i * 7 + 3) % k),
            Link::Sigmoid => f64::from((i + 2 * j) % 3 == 0),
        });
        Dataset { features, labels }
    }

    fn head(kind: HeadKind, tail: Tail, seed: u64) -> Head {
        let dims = Dims::new(4, 6, 2).unwrap().with_buckets(3).unwrap();
        let temp = TemperatureParam::Learned(Temperature::new(0.3, 0.05, 5.0).unwrap());
        Head::random(kind, &dims, tail, temp, InitScale::default(), &RngStream::new(seed)).unwrap()
    }

    fn max_fd_error(head: &Head, data: &Dataset, est: Estimator, link: Link) -> f64 {
        let rng = RngStream::new(77);
        let eval = loss_and_grad(head, data, est, link, &rng).unwrap();
        let analytic = eval.grads.flat();
        let params = head.flat_params();
        let loss_at = |p: &[f64]| {
            let mut h = head.clone();
            h.set_flat_params(p).unwrap();
            loss_and_grad(&h, data, est, link, &rng).unwrap().loss
        };
        let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        let mut worst: f64 = 0.0;
        for i in 0..params.len() {
            let h = 1e-5 * params[i].abs().max(1.0);
            let mut p = params.clone();
            p[i] += h;
            let up = loss_at(&p);
            p[i] -= 2.0 * h;
            let down = loss_at(&p);
            worst = worst.max(rel(analytic[i], (up - down) / (2.0 * h)));
        }
        if let TemperatureParam::Learned(temp) = head.temperature {
            let h = 1e-5 * temp.t.abs().max(1.0);
            let at = |t: f64| {
                let mut hd = head.clone();
                hd.temperature = TemperatureParam::Learned(Temperature { t, ..temp });
                loss_and_grad(&hd, data, est, link, &rng).unwrap().loss
            };
            worst = worst.max(rel(eval.grads.t, (at(temp.t + h) - at(temp.t - h)) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [HeadKind::Het, HeadKind::HetXl, HeadKind::HetH, HeadKind::Det] {
            for tail in [Tail::RankOne, Tail::Diagonal] {
                for link in [Link::Softmax, Link::Sigmoid] {
                    let h = head(kind, tail, 3);
                    let data = batch(4, 6, 5, link, 1);
                    for est in [Estimator::MonteCarlo { samples: 16 }, Estimator::MeanField { lambda: LAMBDA_PI_OVER_8 }] {
                        let err = max_fd_error(&h, &data, est, link);
                        assert!(err <= 1e-4, "{kind:?} {tail:?} {link:?} {est:?}: {err}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_covariance_weight_gradient_is_softmax_regression() {
        let mut spec = crate::covariance::CovarianceSpec::zeros(crate::covariance::NoiseSpace::Logit, Tail::RankOne, 2, 3, 1);
        spec.scale_bias.fill(1.0);
        let h = Head {
            weights: dmatrix![0.2, -0.1, 0.4; 0.5, 0.3, -0.6],
            bias: nalgebra::dvector![0.1, 0.0, -0.2],
            covariance: Some(spec),
            temperature: TemperatureParam::Fixed(0.7),
        };
        let data = Dataset {
            features: dmatrix![1.5, -0.5],
            labels: dmatrix![0.0, 1.0, 0.0],
        };
        let eval = loss_and_grad(&h, &data, Estimator::MeanField { lambda: LAMBDA_PI_OVER_8 }, Link::Softmax, &RngStream::new(0)).unwrap();
        let phi = nalgebra::dvector![1.5, -0.5];
        let logits: Vec<f64> = (h.weights.tr_mul(&phi) + &h.bias).iter().map(|l| l / 0.7).collect();
        let p = crate::math::softmax(&logits);
        for i in 0..2 {
            for j in 0..3 {
                let expected = phi[i] * (p[j] - data.labels[(0, j)]) / 0.7;
                assert!((eval.grads.weights[(i, j)] - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn flat_temperature_has_zero_t_gradient() {
        let mut h = head(HeadKind::HetXl, Tail::RankOne, 2);
        h.temperature = TemperatureParam::Learned(Temperature { t: 0.0, tau_min: 1.0, tau_max: 1.0 + 1e-15 });
        let data = batch(4, 6, 3, Link::Softmax, 2);
        let eval = loss_and_grad(&h, &data, Estimator::MonteCarlo { samples: 4 }, Link::Softmax, &RngStream::new(0)).unwrap();
        assert!(eval.grads.t.abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut h = head(HeadKind::HetXl, Tail::Diagonal, 2);
        h.covariance.as_mut().unwrap().scale_bias[0] = f64::INFINITY;
        let data = batch(4, 6, 2, Link::Softmax, 2);
        let err = loss_and_grad(&h, &data, Estimator::MeanField { lambda: LAMBDA_PI_OVER_8 }, Link::Softmax, &RngStream::new(0));
        assert!(err.is_err());
    }
}
