use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObsKind {
    Head,
    Concentration,
}

/// Where and when a datum was measured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsLabel {
    pub kind: ObsKind,
    pub x: f64,
    pub y: f64,
    /// Measurement time; `None` for steady-state data.
    pub t: Option<f64>,
}

/// Measured data with independent Gaussian noise (diagonal R).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    values: Vec<f64>,
    noise_std: Vec<f64>,
    labels: Vec<ObsLabel>,
}

impl ObservationSet {
    pub fn new(values: Vec<f64>, noise_std: Vec<f64>, labels: Vec<ObsLabel>) -> Result<Self> {
        for (what, len) in [("noise std", noise_std.len()), ("labels", labels.len())] {
            if len != values.len() {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: values.len(),
                    found: len,
                });
            }
        }
        if values.is_empty() {
            return Err(invalid("observation set is empty"));
        }
        if noise_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid("observation noise std must be positive"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("observation values must be finite"));
        }
        Ok(Self {
            values,
            noise_std,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn labels(&self) -> &[ObsLabel] {
        &self.labels
    }

    pub fn value_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    /// Diagonal of R.
    pub fn noise_variance(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.noise_std.iter().map(|s| s * s))
    }

    /// Indices of data of the given kind.
    pub fn indices_of(&self, kind: ObsKind) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind == kind)
            .map(|(k, _)| k)
            .collect()
    }
}

/// Draws `n` noise realizations `alpha * eps`, `eps ~ N(0, R)`, one per column.
pub fn noise_draws(obs: &ObservationSet, alpha: f64, n: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(format!("inflation factor must be positive, got {alpha}")));
    }
    let ny = obs.len();
    let mut out = DMatrix::zeros(ny, n);
    for c in 0..n {
        for r in 0..ny {
            out[(r, c)] = alpha * obs.noise_std[r] * rng.normal();
        }
    }
    Ok(out)
}

/// Perturbed observation copies: column `i` is `y_obs + alpha * eps_i`.
pub fn perturb_observations(
    obs: &ObservationSet,
    alpha: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    let mut out = noise_draws(obs, alpha, n, rng)?;
    for mut col in out.column_iter_mut() {
        for (r, v) in col.iter_mut().enumerate() {
            *v += obs.values[r];
        }
    }
    Ok(out)
}
