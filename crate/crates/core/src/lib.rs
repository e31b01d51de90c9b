//! Heteroscedastic classification heads.
//!
//! A head adds input-dependent Gaussian noise with low-rank-plus-tail
//! covariance to the logits (HET), the pre-logits (HET-XL) or a hashed
//! bucket space (HET-H), and predicts `E[σ(logits/τ)]` by Monte-Carlo or by
//! a mean-field closed form.

pub mod covariance;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod math;
pub mod meanfield;
pub mod rng;
pub mod sampling;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use rng::RngStream;
