use crate::datagen::Dataset;
use crate::error::{dim_check, Result};
use crate::rng::RngStream;
use crate::sampling::{Estimator, Head, Link};

use super::grad::evaluate_at_tau;

/// `∂L/∂τ` of the batch loss with every other parameter held fixed.
pub fn simple_tau_grad(head: &Head, batch: &Dataset, estimator: Estimator, link: Link, rng: &RngStream) -> Result<f64> {
    Ok(evaluate_at_tau(head, batch, estimator, link, rng, head.tau())?.grads.tau)
}

/// One-step sensitivity `∇_τΘ ≈ −s_t·∂_τ[∇_Θ F_train(τ, Θ)]`, with the mixed
/// derivative taken by central differences at `h = 1e−4·τ`.
pub fn luketina_theta_sensitivity(
    grad_train_at: impl Fn(f64) -> Result<Vec<f64>>,
    tau: f64,
    step_size: f64,
) -> Result<Vec<f64>> {
    let h = 1e-4 * tau;
    let plus = grad_train_at(tau + h)?;
    let minus = grad_train_at(tau - h)?;
    dim_check(plus.len() == minus.len(), || "gradient length changed with τ".into())?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| -step_size * (p - m) / (2.0 * h))
        .collect())
}

/// Validation gradient in `τ` under the one-step unrolled approximation:
/// the direct term on `val` plus `⟨∇_Θ F_val, ∇_τΘ⟩`.
///
/// `val` is evaluated on `rng` itself and `train` on `rng.split(0)`.
pub fn luketina_tau_grad(
    head: &Head,
    train: &Dataset,
    val: &Dataset,
    step_size: f64,
    estimator: Estimator,
    link: Link,
    rng: &RngStream,
) -> Result<f64> {
    let tau = head.tau();
    let val_eval = evaluate_at_tau(head, val, estimator, link, rng, tau)?;
    if step_size == 0.0 {
        return Ok(val_eval.grads.tau);
    }
    let train_rng = rng.split(0);
    let sensitivity = luketina_theta_sensitivity(
        |t| Ok(evaluate_at_tau(head, train, estimator, link, &train_rng, t)?.grads.flat()),
        tau,
        step_size,
    )?;
    let indirect: f64 = val_eval.grads.flat().iter().zip(&sensitivity).map(|(g, s)| g * s).sum();
    Ok(val_eval.grads.tau + indirect)
}
