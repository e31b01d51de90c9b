//! Heads, reparametrized noise and Monte-Carlo predictive estimates.

mod head;
mod noise;
mod predict;

pub use head::{Estimator, Head, InitScale, Link};
pub use noise::{draw_noise, mc_logits, noise_from_draws, projected_logits, StandardDraws};
pub(crate) use noise::{add_to_rows, tail_width};
pub use predict::{deterministic_predict, logit_moments, mc_predict, predict, PredictiveBatch};
