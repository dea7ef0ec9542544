//! Network and posterior configuration shared by every kernel computation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hidden-layer pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Linear,
    Relu,
}

/// Coupling strength between consecutive hidden-weight configurations.
///
/// `Infinite` is symbolic: limits are taken analytically, never by plugging
/// in a large float.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Finite(f64),
    Infinite,
}

impl Lambda {
    pub fn is_infinite(self) -> bool {
        matches!(self, Lambda::Infinite)
    }

    /// Finite value, if any.
    pub fn finite(self) -> Option<f64> {
        match self {
            Lambda::Finite(v) => Some(v),
            Lambda::Infinite => None,
        }
    }
}

impl Serialize for Lambda {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Lambda::Finite(v) => s.serialize_f64(*v),
            Lambda::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Lambda {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() && v >= 0.0 => Ok(Lambda::Finite(v)),
            Raw::Num(v) if v.is_infinite() && v > 0.0 => Ok(Lambda::Infinite),
            Raw::Num(v) => Err(serde::de::Error::custom(format!(
                "lambda must be nonnegative, got {v}"
            ))),
            Raw::Text(t) if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinite") => {
                Ok(Lambda::Infinite)
            }
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "lambda must be a number or \"inf\", got {t:?}"
            ))),
        }
    }
}

/// Architecture plus posterior parameters that determine every kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    /// Number of hidden layers L (>= 1).
    pub depth: usize,
    pub nonlinearity: Nonlinearity,
    /// Gaussian prior variance sigma^2 of every weight.
    pub sigma_sq: f64,
    /// Coupling between consecutive tasks' hidden weights.
    pub lambda: Lambda,
    /// Input dimension N0; inputs are scaled by 1/N0 in the base kernel.
    pub input_dim: usize,
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if !(self.sigma_sq > 0.0 && self.sigma_sq.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "sigma_sq must be positive and finite, got {}",
                self.sigma_sq
            )));
        }
        if let Lambda::Finite(v) = self.lambda {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "lambda must be nonnegative and finite, got {v}"
                )));
            }
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_roundtrips_through_serde() {
        let f: Lambda = serde_json::from_str("2.5").unwrap();
        assert_eq!(f, Lambda::Finite(2.5));
        let i: Lambda = serde_json::from_str("\"inf\"").unwrap();
        assert_eq!(i, Lambda::Infinite);
        assert_eq!(serde_json::to_string(&i).unwrap(), "\"inf\"");
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(serde_json::from_str::<Lambda>("-1.0").is_err());
    }

    #[test]
    fn validate_catches_bad_fields() {
        let mut cfg = KernelConfig {
            depth: 1,
            nonlinearity: Nonlinearity::Relu,
            sigma_sq: 1.0,
            lambda: Lambda::Infinite,
            input_dim: 10,
        };
        assert!(cfg.validate().is_ok());
        cfg.depth = 0;
        assert!(cfg.validate().is_err());
        cfg.depth = 1;
        cfg.sigma_sq = 0.0;
        assert!(cfg.validate().is_err());
    }
}
