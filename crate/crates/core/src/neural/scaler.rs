//! Per-dimension standardization of network inputs and outputs.

use crate::error::{invalid, Error, Result};

/// Smallest standard deviation used when standardizing.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

/// Mean and floored std of each row of a `dim x n` column-major matrix over the listed columns.
fn column_stats(data: &[f64], dim: usize, cols: &[usize], what: &str, warnings: &mut Vec<String>) -> (Vec<f64>, Vec<f64>) {
    let n = cols.len() as f64;
    let mut mean = vec![0.0; dim];
    for &c in cols {
        mean.iter_mut().zip(&data[c * dim..(c + 1) * dim]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for &c in cols {
        for (f, v) in data[c * dim..(c + 1) * dim].iter().enumerate() {
            var[f] += (v - mean[f]).powi(2);
        }
    }
    let denom = (n - 1.0).max(1.0);
    let std = var
        .iter()
        .enumerate()
        .map(|(f, v)| {
            let s = (v / denom).sqrt();
            if s < STD_FLOOR {
                warnings.push(format!("{what} dimension {f} is constant; std floored at {STD_FLOOR:e}"));
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

impl Scaler {
    /// Fits on the given columns of `dim x n` column-major input and output matrices.
    /// Returns the scaler and a warning per floored dimension.
    pub fn fit(
        inputs: &[f64],
        in_dim: usize,
        outputs: &[f64],
        out_dim: usize,
        cols: &[usize],
    ) -> Result<(Self, Vec<String>)> {
        if cols.is_empty() {
            return Err(invalid("cannot fit a scaler on zero samples"));
        }
        let n = inputs.len() / in_dim.max(1);
        if inputs.len() != n * in_dim || outputs.len() != n * out_dim || cols.iter().any(|c| *c >= n) {
            return Err(Error::DimensionMismatch {
                what: "scaler data",
                expected: n * out_dim,
                found: outputs.len(),
            });
        }
        let mut warnings = Vec::new();
        let (in_mean, in_std) = column_stats(inputs, in_dim, cols, "input", &mut warnings);
        let (out_mean, out_std) = column_stats(outputs, out_dim, cols, "output", &mut warnings);
        Ok((
            Self {
                in_mean,
                in_std,
                out_mean,
                out_std,
            },
            warnings,
        ))
    }

    pub fn in_dim(&self) -> usize {
        self.in_mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.out_mean.len()
    }

    fn apply(data: &mut [f64], mean: &[f64], std: &[f64], forward: bool) {
        for col in data.chunks_exact_mut(mean.len()) {
            for (f, v) in col.iter_mut().enumerate() {
                *v = if forward {
                    (*v - mean[f]) / std[f]
                } else {
                    *v * std[f] + mean[f]
                };
            }
        }
    }

    /// Standardizes a column-major batch of inputs in place.
    pub fn standardize_inputs(&self, x: &mut [f64]) {
        Self::apply(x, &self.in_mean, &self.in_std, true);
    }

    pub fn unstandardize_inputs(&self, x: &mut [f64]) {
        Self::apply(x, &self.in_mean, &self.in_std, false);
    }

    pub fn standardize_outputs(&self, y: &mut [f64]) {
        Self::apply(y, &self.out_mean, &self.out_std, true);
    }

    pub fn unstandardize_outputs(&self, y: &mut [f64]) {
        Self::apply(y, &self.out_mean, &self.out_std, false);
    }
}
