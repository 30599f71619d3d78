//! Elementwise feature maps φ applied to queries and keys before linear
//! attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Approximate largest input accepted by the `Exp` kernel (ln of `f64::MAX`).
pub const EXP_INPUT_LIMIT: f64 = 709.782_712_893_384;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum,
)]
pub enum KernelKind {
    /// ELU(x) + 1 with α = 1: `x + 1` for x > 0, `exp(x)` otherwise.
    #[default]
    #[value(name = "elu1")]
    #[serde(rename = "elu1")]
    EluPlusOne,
    /// max(x, 0).
    #[value(name = "relu")]
    #[serde(rename = "relu")]
    Relu,
    /// exp(x).
    #[value(name = "exp")]
    #[serde(rename = "exp")]
    Exp,
}

impl KernelKind {
    pub const ALL: [KernelKind; 3] = [KernelKind::EluPlusOne, KernelKind::Relu, KernelKind::Exp];

    pub fn name(self) -> &'static str {
        match self {
            KernelKind::EluPlusOne => "elu1",
            KernelKind::Relu => "relu",
            KernelKind::Exp => "exp",
        }
    }

    /// φ(x) for a single value.
    pub fn value(self, x: f64) -> Result<f64> {
        match self {
            KernelKind::EluPlusOne => Ok(if x > 0.0 { x + 1.0 } else { x.exp() }),
            KernelKind::Relu => Ok(x.max(0.0)),
            KernelKind::Exp => checked_exp(x),
        }
    }

    /// dφ/dx for a single value. Relu uses 0 at the kink.
    pub fn derivative(self, x: f64) -> Result<f64> {
        match self {
            KernelKind::EluPlusOne => Ok(if x > 0.0 { 1.0 } else { x.exp() }),
            KernelKind::Relu => Ok(if x > 0.0 { 1.0 } else { 0.0 }),
            KernelKind::Exp => checked_exp(x),
        }
    }

    /// Whether φ(x) > 0 for every finite input.
    pub fn strictly_positive(self) -> bool {
        !matches!(self, KernelKind::Relu)
    }
}

fn checked_exp(x: f64) -> Result<f64> {
    let y = x.exp();
    if !y.is_finite() {
        return Err(Error::Overflow {
            value: x,
            limit: EXP_INPUT_LIMIT,
        });
    }
    Ok(y)
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu1" => Ok(KernelKind::EluPlusOne),
            "relu" => Ok(KernelKind::Relu),
            "exp" => Ok(KernelKind::Exp),
            other => Err(Error::Domain(format!(
                "unknown kernel '{other}', expected one of: elu1, relu, exp"
            ))),
        }
    }
}

fn map_checked(x: &Matrix, f: impl Fn(f64) -> Result<f64>) -> Result<Matrix> {
    let data = x.data().iter().map(|&v| f(v)).collect::<Result<Vec<_>>>()?;
    Ok(Matrix::from_parts(x.rows(), x.cols(), data))
}

/// Applies φ elementwise.
pub fn kernel_apply(kind: KernelKind, x: &Matrix) -> Result<Matrix> {
    map_checked(x, |v| kind.value(v))
}

/// Elementwise dφ/dx.
pub fn kernel_derivative(kind: KernelKind, x: &Matrix) -> Result<Matrix> {
    map_checked(x, |v| kind.derivative(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(kind: KernelKind, x: f64, h: f64) -> f64 {
        (kind.value(x + h).unwrap() - kind.value(x - h).unwrap()) / (2.0 * h)
    }

    #[test]
    fn elu_plus_one_values() {
        assert_eq!(KernelKind::EluPlusOne.value(0.0).unwrap(), 1.0);
        assert_eq!(KernelKind::EluPlusOne.value(2.5).unwrap(), 3.5);
        let v = KernelKind::EluPlusOne.value(-1.0).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn relu_values() {
        let x = Matrix::from_rows(&[[-2.0, 3.0]]).unwrap();
        let y = kernel_apply(KernelKind::Relu, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn derivative_points() {
        // Both one-sided limits of the ELU+1 derivative are 1 at 0.
        assert_eq!(KernelKind::EluPlusOne.derivative(0.0).unwrap(), 1.0);
        assert_eq!(KernelKind::EluPlusOne.derivative(1e-300).unwrap(), 1.0);
        assert_eq!(KernelKind::Relu.derivative(-1.0).unwrap(), 0.0);
        assert_eq!(KernelKind::Relu.derivative(0.0).unwrap(), 0.0);
    }

    #[test]
    fn elu_derivative_matches_central_difference() {
        let fd = central(KernelKind::EluPlusOne, -0.5, 1e-6);
        let analytic = KernelKind::EluPlusOne.derivative(-0.5).unwrap();
        assert!((fd - analytic).abs() < 1e-8, "{fd} vs {analytic}");
    }

    #[test]
    fn exp_overflow_is_an_error() {
        assert!(KernelKind::Exp.value(709.0).is_ok());
        assert!(matches!(
            KernelKind::Exp.value(710.0),
            Err(Error::Overflow { .. })
        ));
        let x = Matrix::from_rows(&[[0.0, 800.0]]).unwrap();
        assert!(kernel_apply(KernelKind::Exp, &x).is_err());
        assert!(kernel_derivative(KernelKind::Exp, &x).is_err());
    }

    #[test]
    fn names_round_trip() {
        for k in KernelKind::ALL {
            assert_eq!(k.name().parse::<KernelKind>().unwrap(), k);
        }
        let err = "gelu".parse::<KernelKind>().unwrap_err().to_string();
        assert!(err.contains("elu1") && err.contains("relu") && err.contains("exp"));
    }
}
