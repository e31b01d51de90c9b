use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{split, Dataset};
use crate::error::{dim_check, Error, Result};
use crate::meanfield::LAMBDA_PI_OVER_8;
use crate::rng::RngStream;
use crate::sampling::{predict, Estimator, Head, Link};

use super::bilevel::luketina_tau_grad;
use super::grad::loss_and_grad;
use super::loss::{nll, precision_at_1};
use super::temperature::{Temperature, TemperatureParam};

/// Temperatures tried by grid search unless told otherwise.
pub const DEFAULT_TAU_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.5, 3.0, 5.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Fixed(f64),
    /// `t` follows its own training-loss gradient.
    Learned,
    /// `t` follows the one-step unrolled validation gradient; each minibatch
    /// holds out `val_fraction` of its rows as the validation part.
    Luketina { val_fraction: f64 },
    /// One fixed-τ training per grid value, selected on a held-out fold.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub estimator: Estimator,
    pub link: Link,
    pub seed: u64,
    pub tau_mode: TauMode,
    /// Step size for `t`; defaults to `learning_rate`.
    pub tau_learning_rate: Option<f64>,
    /// Keep `W` and `b` at their initial values.
    pub freeze_mean: bool,
    /// MC samples for final and validation metrics. The per-step trace uses
    /// the training estimator.
    pub eval_samples: usize,
    /// Leading training rows on which the per-step trace is measured.
    pub monitor_size: usize,
    /// Held-out fraction used by [`TauMode::Grid`] inside [`train`].
    pub grid_val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            schedule: LrSchedule::Constant,
            momentum: 0.9,
            steps: 2000,
            batch_size: 128,
            estimator: Estimator::MeanField { lambda: LAMBDA_PI_OVER_8 },
            link: Link::Softmax,
            seed: 0,
            tau_mode: TauMode::Learned,
            tau_learning_rate: None,
            freeze_mean: false,
            eval_samples: 256,
            monitor_size: 256,
            grid_val_fraction: 0.2,
        }
    }
}

fn invalid(msg: String) -> Error {
    Error::InvalidArgument(msg)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be finite and ≥ 0, got {}", self.learning_rate)));
        }
        if let Some(lr) = self.tau_learning_rate {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(invalid(format!("tau_learning_rate must be finite and ≥ 0, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_samples == 0 || self.monitor_size == 0 {
            return Err(invalid("steps, batch_size, eval_samples and monitor_size must be positive".into()));
        }
        match self.estimator {
            Estimator::MonteCarlo { samples: 0 } => return Err(invalid("MC estimator needs samples ≥ 1".into())),
            Estimator::MeanField { lambda } if !(lambda > 0.0) => {
                return Err(invalid(format!("mean-field λ must be positive, got {lambda}")))
            }
            _ => {}
        }
        match &self.tau_mode {
            TauMode::Fixed(tau) if !(*tau > 0.0 && tau.is_finite()) => {
                Err(invalid(format!("fixed τ must be positive, got {tau}")))
            }
            TauMode::Luketina { val_fraction } if !(*val_fraction > 0.0 && *val_fraction < 1.0) => {
                Err(invalid(format!("val_fraction must lie in (0, 1), got {val_fraction}")))
            }
            TauMode::Grid(grid) if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) => {
                Err(invalid("τ grid must be a non-empty list of positive values".into()))
            }
            TauMode::Grid(_) if !(self.grid_val_fraction > 0.0 && self.grid_val_fraction < 1.0) => {
                Err(invalid(format!("grid_val_fraction must lie in (0, 1), got {}", self.grid_val_fraction)))
            }
            _ => Ok(()),
        }
    }

    /// Estimator used for monitoring and validation.
    pub fn eval_estimator(&self) -> Estimator {
        match self.estimator {
            Estimator::MonteCarlo { .. } => Estimator::MonteCarlo { samples: self.eval_samples },
            other => other,
        }
    }

    fn schedule_factor(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nll: f64,
    pub prec_at_1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub nll: f64,
    pub prec_at_1: f64,
    pub tau: f64,
    /// Wall time of the step; the only non-reproducible column.
    pub ms: f64,
}

/// Monitoring metrics measured before each update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTrace {
    pub steps: Vec<StepMetrics>,
}

impl MetricsTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// CSV with header `step,nll,prec_at_1,tau,ms`. Without `timing` the `ms`
    /// column is written as 0 so that reruns produce identical files.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from("step,nll,prec_at_1,tau,ms\n");
        for s in &self.steps {
            let ms = if timing { s.ms } else { 0.0 };
            writeln!(out, "{},{:?},{:?},{:?},{:?}", s.step, s.nll, s.prec_at_1, s.tau, ms).unwrap();
        }
        out
    }

    /// Equality of every column except `ms`.
    pub fn same_values(&self, other: &MetricsTrace) -> bool {
        self.len() == other.len()
            && self.steps.iter().zip(&other.steps).all(|(a, b)| {
                a.step == b.step
                    && a.nll.to_bits() == b.nll.to_bits()
                    && a.prec_at_1.to_bits() == b.prec_at_1.to_bits()
                    && a.tau.to_bits() == b.tau.to_bits()
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub head: Head,
    pub trace: MetricsTrace,
    /// Monitoring metrics after the last update.
    pub final_metrics: Metrics,
    /// Present when the temperature was chosen by grid search.
    pub grid: Option<Vec<GridPoint>>,
}

/// NLL and precision@1 of `head` on `data`.
pub fn evaluate(head: &Head, data: &Dataset, estimator: Estimator, link: Link, rng: &RngStream) -> Result<Metrics> {
    let batch = predict(head, &data.features, estimator, link, rng)?;
    Ok(Metrics {
        nll: nll(&batch, &data.labels)?,
        prec_at_1: precision_at_1(&batch.probs, &data.labels)?,
    })
}

fn check_data(head: &Head, data: &Dataset) -> Result<()> {
    dim_check(data.num_features() == head.pre_logit_dim() && data.num_classes() == head.num_classes(), || {
        format!(
            "dataset is D={}, K={} but the head is D={}, K={}",
            data.num_features(),
            data.num_classes(),
            head.pre_logit_dim(),
            head.num_classes()
        )
    })?;
    if data.is_empty() {
        return Err(invalid("empty training set".into()));
    }
    Ok(())
}

/// Minibatch SGD with momentum over the trainable tensors of `head`.
///
/// Every random choice derives from `config.seed`: epoch shuffles, per-step
/// noise streams and the monitoring stream. Grid mode delegates to
/// [`grid_search_tau`] on a held-out fold of `data`.
pub fn train(mut head: Head, data: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    head.validate()?;
    check_data(&head, data)?;
    if let TauMode::Grid(grid) = &config.tau_mode {
        let frac = config.grid_val_fraction;
        let folds = split(data, &[1.0 - frac, frac], config.seed)?;
        let search = grid_search_tau(&head, &folds[0], &folds[1], config, grid)?;
        let mut best = search.best;
        best.grid = Some(search.points);
        return Ok(best);
    }
    match config.tau_mode {
        TauMode::Fixed(tau) => head.temperature = TemperatureParam::Fixed(tau),
        _ => {
            if !head.temperature.is_learned() {
                head.temperature = TemperatureParam::Learned(Temperature::default_learned());
            }
        }
    }

    let base = RngStream::new(config.seed);
    let shuffle_stream = base.split(0);
    let noise_stream = base.split(1);
    let monitor_rng = base.split(2);
    let monitor = data.subset(&(0..config.monitor_size.min(data.len())).collect::<Vec<_>>());
    let batch_size = config.batch_size.min(data.len());
    let frozen = if config.freeze_mean { head.weights.len() + head.bias.len() } else { 0 };
    let tau_lr = config.tau_learning_rate.unwrap_or(config.learning_rate);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch = 0u64;
    let mut pos = data.len();
    let mut params = head.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut tau_velocity = 0.0;
    let mut trace = MetricsTrace::default();

    for step in 0..config.steps {
        let start = Instant::now();
        let tau_before = head.tau();
        let current = evaluate(&head, &monitor, config.estimator, config.link, &monitor_rng).map_err(|e| at_step(step, e))?;
        if pos + batch_size > data.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut shuffle_stream.split(epoch).generator());
            epoch += 1;
            pos = 0;
        }
        let batch = data.subset(&order[pos..pos + batch_size]);
        pos += batch_size;

        let factor = config.schedule_factor(step);
        let lr = config.learning_rate * factor;
        let rng = noise_stream.split(step as u64);
        let (eval, t_grad) = match config.tau_mode {
            TauMode::Luketina { val_fraction } if batch_size >= 2 => {
                let n_val = ((batch_size as f64 * val_fraction).round() as usize).clamp(1, batch_size - 1);
                let n_train = batch_size - n_val;
                let train_part = batch.subset(&(0..n_train).collect::<Vec<_>>());
                let val_part = batch.subset(&(n_train..batch_size).collect::<Vec<_>>());
                let eval = loss_and_grad(&head, &train_part, config.estimator, config.link, &rng.split(0))
                    .map_err(|e| at_step(step, e))?;
                let g_tau = luketina_tau_grad(&head, &train_part, &val_part, lr, config.estimator, config.link, &rng)
                    .map_err(|e| at_step(step, e))?;
                let chain = match head.temperature {
                    TemperatureParam::Learned(t) => t.derivative(),
                    TemperatureParam::Fixed(_) => 0.0,
                };
                (eval, g_tau * chain)
            }
            _ => {
                let eval = loss_and_grad(&head, &batch, config.estimator, config.link, &rng.split(0))
                    .map_err(|e| at_step(step, e))?;
                let t = eval.grads.t;
                (eval, t)
            }
        };
        if !eval.loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at step {step}: loss {}", eval.loss)));
        }

        let grads = eval.grads.flat();
        for (i, (p, v)) in params.iter_mut().zip(velocity.iter_mut()).enumerate() {
            let g = if i < frozen { 0.0 } else { grads[i] };
            *v = config.momentum * *v + g;
            *p -= lr * *v;
        }
        head.set_flat_params(&params)?;
        if let TemperatureParam::Learned(temp) = &mut head.temperature {
            tau_velocity = config.momentum * tau_velocity + t_grad;
            temp.t -= tau_lr * factor * tau_velocity;
        }

        trace.steps.push(StepMetrics {
            step,
            nll: current.nll,
            prec_at_1: current.prec_at_1,
            tau: tau_before,
            ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let final_metrics = evaluate(&head, &monitor, config.eval_estimator(), config.link, &monitor_rng)?;
    Ok(TrainOutcome {
        head,
        trace,
        final_metrics,
        grid: None,
    })
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub tau: f64,
    pub val: Metrics,
    pub train: Metrics,
}

#[derive(Debug, Clone)]
pub struct GridSearch {
    pub best_tau: f64,
    pub points: Vec<GridPoint>,
    /// Training run at `best_tau`.
    pub best: TrainOutcome,
}

/// Trains once per τ in `grid` and keeps the lowest validation NLL, breaking
/// ties toward the smaller τ.
pub fn grid_search_tau(initial: &Head, train_set: &Dataset, val: &Dataset, config: &TrainConfig, grid: &[f64]) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(invalid("τ grid is empty".into()));
    }
    check_data(initial, val)?;
    let val_rng = RngStream::new(config.seed).split(3);
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64, TrainOutcome)> = None;
    for &tau in grid {
        let cfg = TrainConfig {
            tau_mode: TauMode::Fixed(tau),
            ..config.clone()
        };
        let outcome = train(initial.clone(), train_set, &cfg)?;
        let val_metrics = evaluate(&outcome.head, val, cfg.eval_estimator(), cfg.link, &val_rng)?;
        points.push(GridPoint {
            tau,
            val: val_metrics,
            train: outcome.final_metrics,
        });
        let better = match &best {
            None => true,
            Some((b_nll, b_tau, _)) => val_metrics.nll < *b_nll || (val_metrics.nll == *b_nll && tau < *b_tau),
        };
        if better {
            best = Some((val_metrics.nll, tau, outcome));
        }
    }
    let (_, best_tau, best) = best.expect("grid is non-empty");
    Ok(GridSearch { best_tau, points, best })
}
