//! Truncated Karhunen-Loeve expansion of a Gaussian log-conductivity field.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid2D, ScalarField};

/// Separable exponential covariance `var * exp(-|dx|/lambda_x - |dy|/lambda_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSpec {
    pub variance: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub mean: f64,
}

impl CovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance > 0.0 && self.lambda_x > 0.0 && self.lambda_y > 0.0) {
            return Err(invalid("covariance needs positive variance and correlation lengths"));
        }
        if !self.mean.is_finite() {
            return Err(invalid("covariance mean must be finite"));
        }
        Ok(())
    }

    pub fn covariance(&self, dx: f64, dy: f64) -> f64 {
        self.variance * (-dx.abs() / self.lambda_x - dy.abs() / self.lambda_y).exp()
    }
}

#[derive(Clone, Debug)]
pub struct KlBasis {
    grid: Grid2D,
    mean: f64,
    eigenvalues: Vec<f64>,
    /// Column `k` holds eigenfield `s_k` at every node.
    modes: DMatrix<f64>,
    /// Column `k` holds `sqrt(tau_k) * s_k`.
    scaled: DMatrix<f64>,
    captured_fraction: f64,
}

/// Leading `n_kl` eigenpairs of the covariance operator on `grid`.
///
/// The integral operator is discretized with trapezoidal control-volume
/// weights `w`, giving the symmetric problem `W^½ C W^½ u = tau u` with
/// eigenfields `s = W^-½ u`, orthonormal under the area-weighted inner product.
pub fn build_kl_basis(spec: &CovarianceSpec, grid: Grid2D, n_kl: usize) -> Result<KlBasis> {
    spec.validate()?;
    let n = grid.len();
    if n_kl == 0 || n_kl > n {
        return Err(Error::Numeric(format!(
            "cannot keep {n_kl} modes on a grid with {n} nodes"
        )));
    }
    let sqrt_w: Vec<f64> = grid.cell_areas().iter().map(|a| a.sqrt()).collect();
    let pos: Vec<(f64, f64)> = (0..n).map(|k| grid.position(k)).collect();
    let b = faer::Mat::<f64>::from_fn(n, n, |i, j| {
        let (xi, yi) = pos[i];
        let (xj, yj) = pos[j];
        sqrt_w[i] * spec.covariance(xi - xj, yi - yj) * sqrt_w[j]
    });
    let eig = b
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numeric(format!("covariance eigendecomposition failed: {e:?}")))?;
    let s = eig.S();
    let u = eig.U();

    let mut eigenvalues = Vec::with_capacity(n_kl);
    let mut modes = DMatrix::zeros(n, n_kl);
    for k in 0..n_kl {
        // Eigenvalues come back ascending.
        let src = n - 1 - k;
        let tau = s[src];
        if tau < -1e-10 * s[n - 1] {
            return Err(Error::Numeric(format!(
                "covariance matrix has a negative eigenvalue {tau:.3e}"
            )));
        }
        eigenvalues.push(tau.max(0.0));
        let mut col: Vec<f64> = (0..n).map(|i| u[(i, src)] / sqrt_w[i]).collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let peak = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if peak < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        modes.set_column(k, &DVector::from_vec(col));
    }
    let mut scaled = modes.clone();
    for (k, tau) in eigenvalues.iter().enumerate() {
        scaled.column_mut(k).scale_mut(tau.sqrt());
    }
    let captured_fraction = eigenvalues.iter().sum::<f64>() / (spec.variance * grid.area());
    Ok(KlBasis {
        grid,
        mean: spec.mean,
        eigenvalues,
        modes,
        scaled,
        captured_fraction,
    })
}

impl KlBasis {
    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn n_kl(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn captured_fraction(&self) -> f64 {
        self.captured_fraction
    }

    pub fn eigenfield(&self, k: usize) -> Result<ScalarField> {
        if k >= self.n_kl() {
            return Err(invalid(format!("mode {k} out of range")));
        }
        ScalarField::new(self.grid, self.modes.column(k).iter().copied().collect())
    }

    /// Gram matrix `sum_i w_i s_k(x_i) s_l(x_i)` of the eigenfields.
    pub fn gram(&self) -> DMatrix<f64> {
        let w = DVector::from_vec(self.grid.cell_areas());
        let mut weighted = self.modes.clone();
        for mut col in weighted.column_iter_mut() {
            col.component_mul_assign(&w);
        }
        self.modes.transpose() * weighted
    }

    /// Node values `mean + sum_k sqrt(tau_k) s_k xi_k`.
    pub fn realize_values(&self, xi: &[f64]) -> Result<Vec<f64>> {
        if xi.len() != self.n_kl() {
            return Err(Error::DimensionMismatch {
                what: "KL coefficients",
                expected: self.n_kl(),
                found: xi.len(),
            });
        }
        let v = &self.scaled * DVector::from_column_slice(xi);
        Ok(v.iter().map(|d| self.mean + d).collect())
    }
}

pub fn kl_realize(basis: &KlBasis, xi: &[f64]) -> Result<ScalarField> {
    ScalarField::new(basis.grid, basis.realize_values(xi)?)
}
