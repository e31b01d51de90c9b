//! Losses, pathwise gradients, the SGD loop and temperature learning.

mod bilevel;
mod grad;
mod loss;
mod optim;
mod temperature;

pub use bilevel::{luketina_tau_grad, luketina_theta_sensitivity, simple_tau_grad};
pub use grad::{loss_and_grad, CovarianceGradients, HeadGradients, LossEval};
pub use loss::{nll, precision_at_1, PROB_FLOOR};
pub use optim::{
    evaluate, grid_search_tau, train, GridPoint, GridSearch, LrSchedule, Metrics, MetricsTrace, StepMetrics, TauMode,
    TrainConfig, TrainOutcome, DEFAULT_TAU_GRID,
};
pub use temperature::{temperature_value, Temperature, TemperatureParam, DEFAULT_TAU_MAX, DEFAULT_TAU_MIN};
