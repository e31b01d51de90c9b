//! Self-checks run by `hetxl verify`: each compares a library routine with an
//! independent computation and reports the measured discrepancy.

use nalgebra::{dmatrix, dvector, DMatrix};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{
    covariance_dense, extra_param_count, CovarianceSpec, Dims, HeadKind, NoiseSpace, Projection, Tail,
};
use crate::datagen::Dataset;
use crate::diagnostics::spa_cosine;
use crate::error::Result;
use crate::meanfield::{gauss_hermite_sigmoid, mf_sigmoid, LAMBDA_PI_OVER_8};
use crate::rng::RngStream;
use crate::sampling::{draw_noise, logit_moments, mc_logits, mc_predict, projected_logits, Estimator, Head, InitScale, Link};
use crate::training::{loss_and_grad, Temperature, TemperatureParam};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &'static str, result: Result<(bool, String)>) -> Check {
    match result {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn param_counts() -> Result<(bool, String)> {
    let dims = Dims::new(2048, 21843, 50)?;
    let xl = extra_param_count(HeadKind::HetXl, &dims, false)?;
    let het = extra_param_count(HeadKind::Het, &dims, false)?;
    Ok((
        xl == 8_491_008 && het == 90_561_078,
        format!("HET-XL {}, HET {} extra parameters at D=2048, K=21843, R=50", grouped(xl), grouped(het)),
    ))
}

/// `8491008` as `8,491,008`.
fn grouped(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn meanfield_vs_quadrature() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut folding: f64 = 0.0;
    for &s2 in &[0.25, 1.0, 4.0, 9.0] {
        for i in 0..=48 {
            let mu = -6.0 + 0.25 * f64::from(i);
            let mf = mf_sigmoid(mu, s2, 1.0, LAMBDA_PI_OVER_8)?;
            worst = worst.max((mf - gauss_hermite_sigmoid(mu, s2, 1.0, 200)?).abs());
            let tau = 0.37;
            let folded = mf_sigmoid(mu * tau, s2 * tau * tau, tau, LAMBDA_PI_OVER_8)?;
            folding = folding.max((folded - mf).abs());
        }
    }
    Ok((
        worst <= 0.03 && folding <= 1e-12,
        format!("max |mf − GH200| = {worst:.5}, folding error {folding:.1e}"),
    ))
}

fn scalar_head(mu: f64, s2: f64) -> Head {
    let mut spec = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::RankOne, 1, 1, 1);
    spec.tail_bias = dvector![s2.sqrt()];
    Head {
        weights: DMatrix::zeros(1, 1),
        bias: dvector![mu],
        covariance: Some(spec),
        temperature: TemperatureParam::Fixed(1.0),
    }
}

fn mc_vs_quadrature(samples: usize, pairs: usize) -> Result<(bool, String)> {
    let mut g = RngStream::new(11).generator();
    let mut worst_z: f64 = 0.0;
    for i in 0..pairs {
        let mu = g.random_range(-3.0..3.0);
        let s2 = g.random_range(0.1..6.0);
        let est = mc_predict(&scalar_head(mu, s2), &DMatrix::zeros(1, 1), samples, Link::Sigmoid, &RngStream::new(i as u64))?;
        let p = est.probs[(0, 0)];
        let exact = gauss_hermite_sigmoid(mu, s2, 1.0, 200)?;
        // Standard error from the quadrature second moment.
        let second = crate::meanfield::GaussHermite::new(200)?
            .gaussian_expectation(mu, s2, |u| crate::math::sigmoid(u).powi(2));
        let se = ((second - exact * exact) / samples as f64).sqrt();
        worst_z = worst_z.max((p - exact).abs() / se);
    }
    Ok((worst_z <= 3.0, format!("max |MC − GH| = {worst_z:.2} standard errors over {pairs} pairs")))
}

fn moments(samples: usize) -> Result<(bool, String)> {
    let dims = Dims::new(3, 4, 2)?;
    let head = Head::random(HeadKind::HetXl, &dims, Tail::RankOne, TemperatureParam::Fixed(1.0), InitScale::default(), &RngStream::new(5))?;
    let phi = dvector![0.4, -1.2, 0.7];
    let (mean, cov) = logit_moments(&head, &phi, samples, &RngStream::new(6))?;
    let spec = head.covariance.as_ref().expect("heteroscedastic");
    let sigma = head.weights.transpose() * covariance_dense(spec, &phi)? * &head.weights;
    let mu = head.mean_logits(&phi)?;
    let s = samples as f64;
    let mut worst: f64 = 0.0;
    for i in 0..4 {
        worst = worst.max((mean[i] - mu[i]).abs() / (sigma[(i, i)] / s).sqrt());
        for j in 0..4 {
            let sd = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / s).sqrt();
            worst = worst.max((cov[(i, j)] - sigma[(i, j)]).abs() / sd);
        }
    }
    Ok((worst <= 3.0, format!("max moment deviation {worst:.2}σ at S = {samples}")))
}

/// Largest relative error between the analytic gradient and central
/// differences over every parameter and `t`.
pub fn gradient_check(head: &Head, data: &Dataset, estimator: Estimator, link: Link, rng: &RngStream) -> Result<f64> {
    let eval = loss_and_grad(head, data, estimator, link, rng)?;
    let analytic = eval.grads.flat();
    let params = head.flat_params();
    let rel = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
    let mut worst: f64 = 0.0;
    let mut probe = head.clone();
    for i in 0..params.len() {
        let h = 1e-5 * params[i].abs().max(1.0);
        let mut p = params.clone();
        p[i] = params[i] + h;
        probe.set_flat_params(&p)?;
        let up = loss_and_grad(&probe, data, estimator, link, rng)?.loss;
        p[i] = params[i] - h;
        probe.set_flat_params(&p)?;
        let down = loss_and_grad(&probe, data, estimator, link, rng)?.loss;
        worst = worst.max(rel(analytic[i], (up - down) / (2.0 * h)));
    }
    if let TemperatureParam::Learned(temp) = head.temperature {
        let h = 1e-5 * temp.t.abs().max(1.0);
        let mut at = |t: f64| {
            probe.set_flat_params(&params)?;
            probe.temperature = TemperatureParam::Learned(Temperature { t, ..temp });
            Ok::<_, crate::Error>(loss_and_grad(&probe, data, estimator, link, rng)?.loss)
        };
        let fd = (at(temp.t + h)? - at(temp.t - h)?) / (2.0 * h);
        worst = worst.max(rel(eval.grads.t, fd));
    }
    Ok(worst)
}

fn gradients(level: Level) -> Result<(bool, String)> {
    let dims = Dims::new(4, 6, 2)?.with_buckets(3)?;
    let kinds: &[HeadKind] = match level {
        Level::Fast => &[HeadKind::HetXl],
        Level::Full => &[HeadKind::Het, HeadKind::HetXl, HeadKind::HetH],
    };
    let mut g = RngStream::new(21).generator();
    let features = DMatrix::from_fn(5, 4, |_, _| g.sample::<f64, _>(StandardNormal));
    let mut worst: f64 = 0.0;
    for &kind in kinds {
        for tail in [Tail::RankOne, Tail::Diagonal] {
            for link in [Link::Softmax, Link::Sigmoid] {
                let labels = DMatrix::from_fn(5, 6, |i, j| match link {
                    Link::Softmax => f64::from(j == (3 * i + 1) % 6),
                    Link::Sigmoid => f64::from((i + j) % 2 == 0),
                });
                let data = Dataset::new(features.clone(), labels)?;
                let temp = TemperatureParam::Learned(Temperature::new(-0.4, 0.05, 5.0)?);
                let head = Head::random(kind, &dims, tail, temp, InitScale::default(), &RngStream::new(3))?;
                for est in [Estimator::MonteCarlo { samples: 64 }, Estimator::MeanField { lambda: LAMBDA_PI_OVER_8 }] {
                    worst = worst.max(gradient_check(&head, &data, est, link, &RngStream::new(9))?);
                }
            }
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e}")))
}

fn hashed_equals_pre_logit() -> Result<(bool, String)> {
    let dims = Dims::new(5, 12, 3)?;
    let head = Head::random(HeadKind::HetXl, &dims, Tail::Diagonal, TemperatureParam::Fixed(1.0), InitScale::default(), &RngStream::new(8))?;
    let phi = dvector![0.3, -0.1, 0.8, 1.2, -0.6];
    let noise = draw_noise(head.covariance.as_ref().expect("heteroscedastic"), &phi, 100, &RngStream::new(2))?;
    let xl = mc_logits(&head, &phi, &noise)?;
    let hashed = projected_logits(&head.mean_logits(&phi)?, &noise, Projection::Dense(&head.weights))?;
    let diff = (xl - hashed).amax();
    Ok((diff <= 1e-10, format!("max |Δ logits| = {diff:.1e}")))
}

fn spa_trivial() -> Result<(bool, String)> {
    let a = dmatrix![1.0, 0.0, 2.0, 0.0; 0.0, 1.0, 0.0, 1.0];
    let same = spa_cosine(&a, &dmatrix![2.0, 3.0, 4.0, 3.0])?;
    let orth = spa_cosine(&a, &dmatrix![2.0, 0.0, -1.0, 0.0])?;
    let err = (same - 1.0).abs().max(orth.abs());
    Ok((err <= 1e-12, format!("cos = {same:.15}, {orth:.1e}")))
}

fn softmax_rows_sum() -> Result<(bool, String)> {
    let dims = Dims::new(3, 7, 2)?;
    let head = Head::random(HeadKind::Het, &dims, Tail::RankOne, TemperatureParam::Fixed(0.5), InitScale::default(), &RngStream::new(1))?;
    let phis = DMatrix::from_fn(4, 3, |i, j| (i as f64) - (j as f64) * 0.5);
    let batch = mc_predict(&head, &phis, 50, Link::Softmax, &RngStream::new(0))?;
    let worst = batch.probs.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    Ok((worst <= 1e-9, format!("max |Σp − 1| = {worst:.1e}")))
}

pub fn run(level: Level) -> VerifyReport {
    let (mc_samples, pairs, moment_samples) = match level {
        Level::Fast => (20_000, 5, 20_000),
        Level::Full => (200_000, 20, 200_000),
    };
    VerifyReport {
        checks: vec![
            check("param_counts", param_counts()),
            check("meanfield_vs_quadrature", meanfield_vs_quadrature()),
            check("mc_vs_quadrature", mc_vs_quadrature(mc_samples, pairs)),
            check("logit_moments", moments(moment_samples)),
            check("gradients", gradients(level)),
            check("hashed_equals_pre_logit", hashed_equals_pre_logit()),
            check("spa_trivial", spa_trivial()),
            check("softmax_simplex", softmax_rows_sum()),
        ],
    }
}
