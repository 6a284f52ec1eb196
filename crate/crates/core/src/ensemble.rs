use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};

/// Parameter ensemble (one member per column) with optional simulated outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    params: DMatrix<f64>,
    outputs: Option<DMatrix<f64>>,
    iteration: usize,
}

impl Ensemble {
    pub fn new(params: DMatrix<f64>, iteration: usize) -> Result<Self> {
        if params.ncols() < 2 {
            return Err(invalid(format!(
                "an ensemble needs at least 2 members, got {}",
                params.ncols()
            )));
        }
        if params.nrows() == 0 {
            return Err(invalid("ensemble has no parameters"));
        }
        if params.iter().any(|v| v.is_nan()) {
            return Err(invalid("ensemble parameters contain NaN"));
        }
        Ok(Self {
            params,
            outputs: None,
            iteration,
        })
    }

    pub fn with_outputs(mut self, outputs: DMatrix<f64>) -> Result<Self> {
        self.set_outputs(outputs)?;
        Ok(self)
    }

    pub fn set_outputs(&mut self, outputs: DMatrix<f64>) -> Result<()> {
        if outputs.ncols() != self.params.ncols() {
            return Err(Error::DimensionMismatch {
                what: "output columns",
                expected: self.params.ncols(),
                found: outputs.ncols(),
            });
        }
        if outputs.iter().any(|v| v.is_nan()) {
            return Err(invalid("ensemble outputs contain NaN"));
        }
        self.outputs = Some(outputs);
        Ok(())
    }

    /// Next-iteration ensemble holding updated parameters; outputs are stale until re-evaluated.
    pub fn updated(&self, params: DMatrix<f64>) -> Result<Self> {
        if params.shape() != self.params.shape() {
            return Err(Error::DimensionMismatch {
                what: "updated parameter matrix",
                expected: self.params.len(),
                found: params.len(),
            });
        }
        Self::new(params, self.iteration + 1)
    }

    pub fn params(&self) -> &DMatrix<f64> {
        &self.params
    }

    pub fn outputs(&self) -> Option<&DMatrix<f64>> {
        self.outputs.as_ref()
    }

    pub fn require_outputs(&self) -> Result<&DMatrix<f64>> {
        self.outputs
            .as_ref()
            .ok_or_else(|| invalid("ensemble outputs are missing or stale"))
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn n_members(&self) -> usize {
        self.params.ncols()
    }

    pub fn n_params(&self) -> usize {
        self.params.nrows()
    }

    pub fn n_outputs(&self) -> Option<usize> {
        self.outputs.as_ref().map(|y| y.nrows())
    }

    pub fn member(&self, i: usize) -> Vec<f64> {
        self.params.column(i).iter().copied().collect()
    }
}

/// Per-parameter mean and unbiased (N_e - 1) standard deviation.
pub fn ensemble_stats(e: &Ensemble) -> Result<(DVector<f64>, DVector<f64>)> {
    matrix_row_stats(e.params())
}

pub(crate) fn matrix_row_stats(m: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = m.ncols();
    if n < 2 {
        return Err(invalid("statistics need at least 2 members"));
    }
    let mean = row_mean(m);
    let mut var = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        for (k, v) in col.iter().enumerate() {
            let d = v - mean[k];
            var[k] += d * d;
        }
    }
    let std = var.map(|s: f64| (s / (n - 1) as f64).sqrt());
    Ok((mean, std))
}

/// Row sums divided by the column count.
fn row_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let mut sum = DVector::zeros(m.nrows());
    for col in m.column_iter() {
        sum += col;
    }
    sum / m.ncols() as f64
}

/// Columns minus their row mean.
pub(crate) fn anomalies(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = row_mean(m);
    let mut a = m.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn identical_columns() {
        let v = [1.5, -2.0, 3.0];
        let m = DMatrix::from_fn(3, 6, |r, _| v[r]);
        let (mean, std) = ensemble_stats(&Ensemble::new(m, 0).unwrap()).unwrap();
        for k in 0..3 {
            assert_eq!(mean[k], v[k]);
            assert_eq!(std[k], 0.0);
        }
    }

    #[test]
    fn two_point() {
        let e = Ensemble::new(DMatrix::from_row_slice(1, 2, &[1.0, 3.0]), 0).unwrap();
        let (mean, std) = ensemble_stats(&e).unwrap();
        assert_eq!(mean[0], 2.0);
        assert!((std[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn matches_two_pass_oracle() {
        let mut rng = RngStream::new(5, 0);
        let m = DMatrix::from_fn(5, 50, |_, _| 3.0 + 2.0 * rng.normal());
        let (mean, std) = ensemble_stats(&Ensemble::new(m.clone(), 0).unwrap()).unwrap();
        for r in 0..5 {
            let row: Vec<f64> = (0..50).map(|c| m[(r, c)]).collect();
            let mu = row.iter().sum::<f64>() / 50.0;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 49.0;
            assert!((mean[r] - mu).abs() < 1e-12);
            assert!((std[r] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_small_or_nan() {
        assert!(Ensemble::new(DMatrix::zeros(3, 1), 0).is_err());
        assert!(Ensemble::new(DMatrix::zeros(0, 3), 0).is_err());
        let mut m = DMatrix::zeros(2, 3);
        m[(1, 1)] = f64::NAN;
        assert!(Ensemble::new(m, 0).is_err());
        let e = Ensemble::new(DMatrix::zeros(2, 3), 0).unwrap();
        assert!(e.with_outputs(DMatrix::zeros(4, 2)).is_err());
    }
}
