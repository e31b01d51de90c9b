use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use hetxl_core::covariance::{covariance_dense, logit_variances, CovarianceSpec, Dims, HeadKind, NoiseSpace, Tail};
use hetxl_core::meanfield::gauss_hermite_sigmoid;
use hetxl_core::sampling::{draw_noise, mc_predict, Head, InitScale, Link};
use hetxl_core::training::TemperatureParam;
use hetxl_core::RngStream;

fn normal_matrix(rows: usize, cols: usize, std: f64, seed: u64) -> DMatrix<f64> {
    let mut g = RngStream::new(seed).generator();
    DMatrix::from_fn(rows, cols, |_, _| std * g.sample::<f64, _>(StandardNormal))
}

#[test]
fn noise_moments_match_covariance() {
    let dims = Dims::new(2, 3, 2).unwrap();
    let head = Head::random(HeadKind::Het, &dims, Tail::Diagonal, TemperatureParam::Fixed(1.0), InitScale::default(), &RngStream::new(4))
        .unwrap();
    let spec = head.covariance.as_ref().unwrap();
    let phi = DVector::from_vec(vec![0.8, -0.5]);
    let s = 200_000;
    let noise = draw_noise(spec, &phi, s, &RngStream::new(41)).unwrap();
    let sigma = covariance_dense(spec, &phi).unwrap();
    let mean = noise.row_mean();
    let cov = noise.tr_mul(&noise) / s as f64;
    for i in 0..3 {
        assert!(mean[i].abs() <= 3.0 * (sigma[(i, i)] / s as f64).sqrt(), "mean {i}");
        for j in 0..3 {
            let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / s as f64).sqrt();
            assert!((cov[(i, j)] - sigma[(i, j)]).abs() <= 3.0 * se, "cov ({i},{j})");
        }
    }
}

#[test]
fn exchangeable_noise_gives_uniform_softmax() {
    let k = 5;
    let mut spec = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::Diagonal, 1, k, 1);
    spec.factors = DMatrix::from_element(1, k, 1.0);
    spec.scale_bias = DVector::from_element(k, 1.5);
    spec.tail_bias = DVector::from_element(k, 0.7);
    let head = Head {
        weights: DMatrix::zeros(1, k),
        bias: DVector::zeros(k),
        covariance: Some(spec),
        temperature: TemperatureParam::Fixed(1.0),
    };
    let s = 50_000;
    let p = mc_predict(&head, &DMatrix::zeros(1, 1), s, Link::Softmax, &RngStream::new(3)).unwrap();
    for j in 0..k {
        // The per-sample probability is bounded by 1, so its variance is below 1/4.
        assert!((p.probs[(0, j)] - 0.2).abs() <= 3.0 * (0.25 / s as f64).sqrt(), "{}", p.probs[(0, j)]);
    }
}

fn random_head(seed: u64) -> Head {
    let dims = Dims::new(4, 7, 2).unwrap().with_buckets(3).unwrap();
    let kind = [HeadKind::Het, HeadKind::HetXl, HeadKind::HetH][(seed % 3) as usize];
    let tail = if seed % 2 == 0 { Tail::RankOne } else { Tail::Diagonal };
    let scale = InitScale {
        weights: 0.8,
        ..InitScale::default()
    };
    Head::random(kind, &dims, tail, TemperatureParam::Fixed(0.6), scale, &RngStream::new(seed)).unwrap()
}

#[test]
fn predictions_are_deterministic() {
    let head = random_head(1);
    let phis = normal_matrix(9, 4, 1.0, 2);
    for link in [Link::Softmax, Link::Sigmoid] {
        let a = mc_predict(&head, &phis, 300, link, &RngStream::new(8)).unwrap();
        let b = mc_predict(&head, &phis, 300, link, &RngStream::new(8)).unwrap();
        assert_eq!(a, b);
        let c = mc_predict(&head, &phis, 300, link, &RngStream::new(8).split(1)).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn predictions_ignore_thread_count() {
    let head = random_head(2);
    let phis = normal_matrix(33, 4, 1.0, 3);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| mc_predict(&head, &phis, 500, Link::Softmax, &RngStream::new(1)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    // Each row depends only on its own stream, not on its neighbours.
    let alone = mc_predict(&head, &phis.rows(0, 1).into_owned(), 500, Link::Softmax, &RngStream::new(1)).unwrap();
    assert_eq!(alone.probs.row(0), one.probs.row(0));
}

#[test]
fn standard_error_shrinks_as_inverse_root_of_samples() {
    // Logit-space sigmoid heads: every class marginal is N(μ_j, s_j²), so the
    // quadrature gives the exact predictive.
    let (k, heads) = (100, 50);
    let mut err = [0.0, 0.0];
    for h in 0..heads {
        let mut spec = CovarianceSpec::zeros(NoiseSpace::Logit, Tail::Diagonal, 1, k, 1);
        spec.factors = normal_matrix(1, k, 0.8, 100 + h);
        spec.scale_bias = DVector::from_element(k, 1.0);
        spec.tail_bias = DVector::from_element(k, 0.3);
        let head = Head {
            weights: DMatrix::zeros(1, k),
            bias: normal_matrix(k, 1, 1.5, 200 + h).column(0).into_owned(),
            covariance: Some(spec),
            temperature: TemperatureParam::Fixed(1.0),
        };
        let phi = DVector::zeros(1);
        let s2 = logit_variances(head.covariance.as_ref().unwrap(), &phi, &head.weights).unwrap();
        for (slot, samples) in [(0, 10_000), (1, 40_000)] {
            let p = mc_predict(&head, &DMatrix::zeros(1, 1), samples, Link::Sigmoid, &RngStream::new(h).split(samples as u64))
                .unwrap();
            for j in 0..k {
                let exact = gauss_hermite_sigmoid(head.bias[j], s2[j], 1.0, 100).unwrap();
                err[slot] += (p.probs[(0, j)] - exact).abs();
            }
        }
    }
    assert!(err[1] <= 0.55 * err[0], "mean error ratio {:.3}", err[1] / err[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn outputs_are_probabilities(seed in 0u64..10_000, samples in 1usize..64, rows in 1usize..6) {
        let head = random_head(seed);
        let phis = normal_matrix(rows, 4, 2.0, seed + 1);
        for link in [Link::Softmax, Link::Sigmoid] {
            let batch = mc_predict(&head, &phis, samples, link, &RngStream::new(seed)).unwrap();
            prop_assert!(batch.check_invariants().is_ok());
            for p in batch.probs.iter() {
                prop_assert!((0.0..=1.0).contains(p));
            }
            if link == Link::Softmax {
                for r in batch.probs.row_iter() {
                    prop_assert!((r.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
