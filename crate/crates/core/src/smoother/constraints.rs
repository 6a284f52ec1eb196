//! Per-parameter bounds applied after every update.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
}

/// Bounds for each parameter row. An empty set leaves any ensemble unconstrained.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamConstraints {
    bounds: Vec<Bound>,
}

impl ParamConstraints {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(bounds: Vec<Bound>) -> Result<Self> {
        for (k, b) in bounds.iter().enumerate() {
            if let (Some(lo), Some(hi)) = (b.lower, b.upper) {
                if !(lo < hi) {
                    return Err(invalid(format!("parameter {k}: lower bound {lo} not below upper {hi}")));
                }
            }
            if b.lower.is_some_and(f64::is_nan) || b.upper.is_some_and(f64::is_nan) {
                return Err(invalid(format!("parameter {k}: NaN bound")));
            }
        }
        Ok(Self { bounds })
    }

    /// The same closed interval for all `n` parameters.
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![
            Bound {
                lower: Some(lower),
                upper: Some(upper)
            };
            n
        ])
    }

    pub fn bounds(&self) -> &[Bound] {
        &self.bounds
    }

    pub fn is_empty(&self) -> bool {
        self.bounds.is_empty()
    }

    /// Clamps every member into the bounds.
    pub fn apply(&self, params: &mut DMatrix<f64>) -> Result<()> {
        if self.bounds.is_empty() {
            return Ok(());
        }
        if params.nrows() != self.bounds.len() {
            return Err(Error::DimensionMismatch {
                what: "constraint rows",
                expected: self.bounds.len(),
                found: params.nrows(),
            });
        }
        for mut col in params.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(&self.bounds) {
                if let Some(lo) = b.lower {
                    *v = v.max(lo);
                }
                if let Some(hi) = b.upper {
                    *v = v.min(hi);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_into_bounds() {
        let c = ParamConstraints::new(vec![
            Bound::default(),
            Bound {
                lower: Some(3.0),
                upper: Some(5.0),
            },
            Bound {
                lower: Some(0.0),
                upper: None,
            },
        ])
        .unwrap();
        let mut m = DMatrix::from_row_slice(3, 2, &[-9.0, 9.0, 2.0, 6.0, -1.0, 100.0]);
        c.apply(&mut m).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(3, 2, &[-9.0, 9.0, 3.0, 5.0, 0.0, 100.0]));
        assert!(c.apply(&mut DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rejects_inverted_bounds() {
        assert!(ParamConstraints::uniform(2, 1.0, 1.0).is_err());
        assert!(ParamConstraints::none().apply(&mut DMatrix::zeros(4, 3)).is_ok());
    }
}
