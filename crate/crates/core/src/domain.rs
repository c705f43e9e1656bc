use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.is_empty() {
            return Err(Error::Config("domain has no dimensions".into()));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && l < u))
        {
            return Err(Error::Config(format!(
                "domain must be bounded with lower < upper: {lower:?} / {upper:?}"
            )));
        }
        Ok(BoxDomain { lower, upper })
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        BoxDomain {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn sides(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l)
    }

    /// Largest ∞-norm distance between two points of the box.
    pub fn diam_inf(&self) -> f64 {
        self.sides().fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}
