use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::tensor::Scalar;

/// Norm-rescaling non-linearity `g(u) = s(||u||) u` applied to dynamic
/// weight vectors.
///
/// Both variants guard the norm with `Scalar::NORM_EPS`, so `g(0) = 0` and
/// forward and backward stay finite everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    /// Rescale to unit norm.
    L2,
    /// Squashing: unit direction times `||u||^2 / (1 + ||u||^2)`.
    Sq,
}

impl Nonlinearity {
    /// Factor `s(n)` multiplying `u` when `||u|| = n`.
    #[inline]
    pub fn factor<S: Scalar>(self, n: S) -> S {
        let d = n + S::NORM_EPS;
        match self {
            Nonlinearity::L2 => S::one() / d,
            Nonlinearity::Sq => n * n / (d * (S::one() + n * n)),
        }
    }

    /// `s'(n) / n`, the coefficient of `u (u . g)` in the vector-Jacobian
    /// product. Only evaluated for `n > 0`.
    #[inline]
    pub(crate) fn dfactor_over_n<S: Scalar>(self, n: S) -> S {
        let d = n + S::NORM_EPS;
        match self {
            Nonlinearity::L2 => -S::one() / (d * d * n),
            Nonlinearity::Sq => {
                let q = S::one() + n * n;
                let den = d * q;
                let dden = q + d * S::of(2.0) * n;
                (S::of(2.0) * den - n * dden) / (den * den)
            }
        }
    }

    /// Applies `g` to a whole vector.
    pub fn apply<S: Scalar>(self, u: &[S]) -> Vec<S> {
        let n = u.iter().map(|&v| v * v).sum::<S>().sqrt();
        let s = self.factor(n);
        u.iter().map(|&v| v * s).collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Nonlinearity::L2 => "l2",
            Nonlinearity::Sq => "sq",
        }
    }
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Nonlinearity::L2),
            "sq" => Ok(Nonlinearity::Sq),
            other => Err(Error::Config(format!("unknown non-linearity '{other}'"))),
        }
    }
}
