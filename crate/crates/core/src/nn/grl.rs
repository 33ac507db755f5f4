//! Gradient reversal: identity on the way forward, `−λ·g` on the way back.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{Error, Result};

/// Non-negative magnitude of the reversed gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct GrlCoefficient(f64);

impl GrlCoefficient {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!(
                "gradient-reversal coefficient must be finite and >= 0, got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for GrlCoefficient {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<GrlCoefficient> for f64 {
    fn from(c: GrlCoefficient) -> f64 {
        c.0
    }
}

pub fn grl<T: Real>(x: &[T], _coeff: GrlCoefficient) -> Vec<T> {
    x.to_vec()
}

pub fn grl_backward<T: Real>(dy: &[T], coeff: GrlCoefficient) -> Vec<T> {
    let k = T::lit(-coeff.value());
    dy.iter().map(|&d| k * d).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_is_bit_identity() {
        let x = [3.7f32, -0.0, f32::MIN_POSITIVE, 1e30];
        let y = grl(&x, GrlCoefficient::new(0.3).unwrap());
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn backward_reverses_and_scales() {
        let one = GrlCoefficient::new(1.0).unwrap();
        let half = GrlCoefficient::new(0.5).unwrap();
        assert_eq!(grl_backward(&[2.0f64], one), vec![-2.0]);
        assert_eq!(grl_backward(&[2.0f64], half), vec![-1.0]);
    }

    #[test]
    fn rejects_negative_coefficient() {
        assert!(GrlCoefficient::new(-0.1).is_err());
        assert!(GrlCoefficient::new(f64::NAN).is_err());
        assert!(serde_json::from_str::<GrlCoefficient>("-1.0").is_err());
    }
}
