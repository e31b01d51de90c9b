use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use hetxl_core::covariance::{CovarianceSpec, NoiseSpace, Tail};
use hetxl_core::datagen::*;
use hetxl_core::math::sigmoid;
use hetxl_core::sampling::{mc_predict, Link};
use hetxl_core::training::TemperatureParam;
use hetxl_core::RngStream;

const REPEATS: usize = 100_000;

fn fixed_x(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| ((i as f64) * 0.7).sin())
}

fn frequencies(spec: &SyntheticSpec, x: &DVector<f64>, seed: u64) -> Vec<f64> {
    let mut g = RngStream::new(seed).generator();
    let mut counts = vec![0.0; spec.ground_truth.num_classes()];
    for _ in 0..REPEATS {
        let y = draw_label(spec, x, &mut g).unwrap();
        for (c, v) in counts.iter_mut().zip(y.iter()) {
            *c += v;
        }
    }
    counts.iter().map(|c| c / REPEATS as f64).collect()
}

fn softmax(u: &DVector<f64>) -> Vec<f64> {
    let m = u.max();
    let z: f64 = u.iter().map(|v| (v - m).exp()).sum();
    u.iter().map(|v| (v - m).exp() / z).collect()
}

#[test]
fn gumbel_frequencies_follow_softmax() {
    let mut truth = synthetic_ground_truth(6, 8, 2, 3);
    truth.weights /= 3.0;
    let spec = SyntheticSpec {
        ground_truth: truth,
        noise: NoiseKind::Gumbel { scale: 1.0 },
        labels: LabelKind::MultiClass,
        num_examples: 1,
        seed: 0,
    };
    let x = fixed_x(6);
    let p = softmax(&spec.ground_truth.mean_logits(&x).unwrap());
    let f = frequencies(&spec, &x, 11);
    for j in 0..8 {
        let sd = (p[j] * (1.0 - p[j]) / REPEATS as f64).sqrt();
        assert!((f[j] - p[j]).abs() <= 3.0 * sd, "class {j}: {:.4} vs {:.4}", f[j], p[j]);
    }
}

#[test]
fn gumbel_scale_acts_as_temperature() {
    let spec = SyntheticSpec {
        ground_truth: synthetic_ground_truth(4, 5, 1, 8),
        noise: NoiseKind::Gumbel { scale: 2.5 },
        labels: LabelKind::MultiClass,
        num_examples: 1,
        seed: 0,
    };
    let x = fixed_x(4);
    let p = softmax(&(spec.ground_truth.mean_logits(&x).unwrap() / 2.5));
    let f = frequencies(&spec, &x, 12);
    for j in 0..5 {
        assert!((f[j] - p[j]).abs() <= 3.0 * (p[j] * (1.0 - p[j]) / REPEATS as f64).sqrt());
    }
}

#[test]
fn multilabel_gumbel_frequencies_follow_sigmoid() {
    let spec = SyntheticSpec {
        ground_truth: synthetic_ground_truth(4, 6, 1, 9),
        noise: NoiseKind::Gumbel { scale: 1.5 },
        labels: LabelKind::MultiLabel,
        num_examples: 1,
        seed: 0,
    };
    let x = fixed_x(4);
    let u = spec.ground_truth.mean_logits(&x).unwrap();
    let f = frequencies(&spec, &x, 13);
    for j in 0..6 {
        let p = sigmoid(u[j] / 1.5);
        assert!((f[j] - p).abs() <= 3.0 * (p * (1.0 - p) / REPEATS as f64).sqrt());
    }
}

#[test]
fn gaussian_frequencies_follow_zero_temperature_predictive() {
    let spec = default_synthetic_spec(0);
    let x = fixed_x(16);
    let f = frequencies(&spec, &x, 14);
    let mut cold = spec.ground_truth.clone();
    cold.temperature = TemperatureParam::Fixed(1e-3);
    let s = 100_000;
    let p = mc_predict(&cold, &DMatrix::from_row_slice(1, 16, x.as_slice()), s, Link::Softmax, &RngStream::new(15)).unwrap();
    for j in 0..40 {
        let q = p.probs[(0, j)];
        // Near zero temperature each sample is almost one-hot, so both sides are binomial.
        let sd = (q * (1.0 - q) * (1.0 / REPEATS as f64 + 1.0 / s as f64)).sqrt();
        assert!((f[j] - q).abs() <= 3.0 * sd.max(1e-12), "class {j}: {:.5} vs {:.5}", f[j], q);
    }
}

#[test]
fn zero_noise_gives_argmax_of_utility() {
    let spec = SyntheticSpec {
        noise: NoiseKind::None,
        num_examples: 500,
        ..default_synthetic_spec(2)
    };
    let data = make_synthetic(&spec).unwrap().dataset;
    for n in 0..data.len() {
        let u = spec.ground_truth.mean_logits(&data.features.row(n).transpose()).unwrap();
        assert_eq!(data.class_indices()[n], u.argmax().0);
        assert_eq!(data.labels.row(n).sum(), 1.0);
    }
}

#[test]
fn zero_covariance_matches_no_noise() {
    let mut truth = synthetic_ground_truth(5, 7, 2, 4);
    truth.covariance = Some(CovarianceSpec::zeros(NoiseSpace::PreLogit, Tail::RankOne, 5, 5, 2));
    let gaussian = SyntheticSpec {
        ground_truth: truth,
        noise: NoiseKind::Gaussian,
        labels: LabelKind::MultiClass,
        num_examples: 2000,
        seed: 6,
    };
    let none = SyntheticSpec {
        noise: NoiseKind::None,
        ..gaussian.clone()
    };
    assert_eq!(make_synthetic(&gaussian).unwrap().dataset, make_synthetic(&none).unwrap().dataset);
}

#[test]
fn generation_ignores_thread_layout() {
    let spec = SyntheticSpec {
        num_examples: 3000,
        ..default_synthetic_spec(1)
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| make_synthetic(&spec).unwrap().dataset)
    };
    let one = run(1);
    assert_eq!(one, run(3));
    let short = make_synthetic(&SyntheticSpec { num_examples: 100, ..spec.clone() }).unwrap().dataset;
    let prefix: Vec<usize> = (0..100).collect();
    assert_eq!(short, one.subset(&prefix));
}

#[test]
fn default_spec_shape() {
    let spec = default_synthetic_spec(0);
    assert_eq!(spec.num_examples, 20_000);
    assert_eq!(spec.ground_truth.pre_logit_dim(), 16);
    assert_eq!(spec.ground_truth.num_classes(), 40);
    assert_eq!(spec.ground_truth.covariance.as_ref().unwrap().num_factors(), 4);
    let invalid = SyntheticSpec {
        noise: NoiseKind::Gumbel { scale: 0.0 },
        ..spec.clone()
    };
    assert!(make_synthetic(&invalid).is_err());
    assert!(make_synthetic(&SyntheticSpec { num_examples: 0, ..spec }).is_err());
}

#[test]
fn split_sizes() {
    let parts = split_indices(1000, &[0.8, 0.1, 0.1], 3).unwrap();
    assert_eq!(parts.iter().map(Vec::len).collect::<Vec<_>>(), vec![800, 100, 100]);
    assert_eq!(parts, split_indices(1000, &[0.8, 0.1, 0.1], 3).unwrap());
    assert_eq!(split_indices(7, &[1.0], 1).unwrap(), vec![(0..7).collect::<Vec<_>>()]);
    assert!(split_indices(10, &[0.0, 1.0], 1).is_err());
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 1usize..400, a in 0.05f64..0.9, seed in any::<u64>()) {
        prop_assume!((n as f64 * a).round() >= 1.0 && (n as f64 * (1.0 - a)).round() >= 1.0);
        let parts = split_indices(n, &[a, 1.0 - a], seed).unwrap();
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        for p in &parts {
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
