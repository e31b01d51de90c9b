use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;

pub const DEFAULT_TAU_MIN: f64 = 0.05;
pub const DEFAULT_TAU_MAX: f64 = 5.0;

/// Bounded temperature `τ(t) = (τ_max − τ_min)·sigmoid(t) + τ_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub t: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl Temperature {
    pub fn new(t: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        if !(tau_min > 0.0) || !(tau_max > tau_min) || !tau_max.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature bounds must satisfy 0 < τ_min < τ_max, got [{tau_min}, {tau_max}]"
            )));
        }
        Ok(Self { t, tau_min, tau_max })
    }

    /// Bounds `[0.05, 5.0]`, initialized at the midpoint.
    pub fn default_learned() -> Self {
        Self {
            t: 0.0,
            tau_min: DEFAULT_TAU_MIN,
            tau_max: DEFAULT_TAU_MAX,
        }
    }

    /// Chooses `t` so that `τ(t) = tau`; `tau` must lie strictly inside the bounds.
    pub fn from_value(tau: f64, tau_min: f64, tau_max: f64) -> Result<Self> {
        let mut temp = Self::new(0.0, tau_min, tau_max)?;
        if !(tau > tau_min && tau < tau_max) {
            return Err(Error::InvalidArgument(format!(
                "τ = {tau} outside the open interval ({tau_min}, {tau_max})"
            )));
        }
        let frac = (tau - tau_min) / (tau_max - tau_min);
        temp.t = (frac / (1.0 - frac)).ln();
        Ok(temp)
    }

    pub fn value(&self) -> f64 {
        (self.tau_max - self.tau_min) * sigmoid(self.t) + self.tau_min
    }

    /// `dτ/dt`.
    pub fn derivative(&self) -> f64 {
        let s = sigmoid(self.t);
        (self.tau_max - self.tau_min) * s * (1.0 - s)
    }
}

/// Free function form of [`Temperature::value`], validating the bounds.
pub fn temperature_value(temp: &Temperature) -> Result<f64> {
    Temperature::new(temp.t, temp.tau_min, temp.tau_max)?;
    Ok(temp.value())
}

/// Temperature of a head: either held fixed or learned through `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TemperatureParam {
    Fixed(f64),
    Learned(Temperature),
}

impl TemperatureParam {
    pub fn value(&self) -> f64 {
        match self {
            TemperatureParam::Fixed(tau) => *tau,
            TemperatureParam::Learned(temp) => temp.value(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, TemperatureParam::Learned(_))
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TemperatureParam::Fixed(tau) if !(*tau > 0.0 && tau.is_finite()) => {
                Err(Error::InvalidArgument(format!("fixed temperature {tau} is not positive")))
            }
            TemperatureParam::Fixed(_) => Ok(()),
            TemperatureParam::Learned(temp) => Temperature::new(temp.t, temp.tau_min, temp.tau_max).map(|_| ()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_initialization() {
        let temp = Temperature::default_learned();
        assert!((temperature_value(&temp).unwrap() - 2.525).abs() < 1e-15);
    }

    #[test]
    fn saturates_at_bounds() {
        let hi = Temperature::new(40.0, 0.05, 5.0).unwrap();
        let lo = Temperature::new(-40.0, 0.05, 5.0).unwrap();
        assert!((hi.value() - 5.0).abs() < 1e-12);
        assert!((lo.value() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(Temperature::new(0.0, 1.0, 1.0).is_err());
        assert!(temperature_value(&Temperature { t: 0.0, tau_min: 2.0, tau_max: 1.0 }).is_err());
    }

    #[test]
    fn from_value_inverts() {
        let temp = Temperature::from_value(0.8, 0.05, 5.0).unwrap();
        assert!((temp.value() - 0.8).abs() < 1e-12);
        assert!(Temperature::from_value(0.05, 0.05, 5.0).is_err());
    }

    #[test]
    fn bounded_and_increasing_on_grid() {
        let mut prev = f64::NEG_INFINITY;
        for i in -500i32..=500 {
            let temp = Temperature::new(i as f64 / 10.0, 0.05, 5.0).unwrap();
            let tau = temp.value();
            assert!((0.05..=5.0).contains(&tau));
            if i.abs() < 300 {
                assert!(tau > prev);
            } else {
                assert!(tau >= prev);
            }
            prev = tau;
        }
    }
}
