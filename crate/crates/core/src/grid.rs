//! Regular 2D node grids and scalar fields on them.
//!
//! Nodes sit on the domain boundary and are numbered row-major with y-major
//! rows: node `(i, j)` (column `i` along x, row `j` along y) has index
//! `j * nx + i`. Every module in the crate uses this ordering.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(invalid(format!("grid needs at least 2x2 nodes, got {nx}x{ny}")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(invalid(format!("grid extents must be positive, got {lx}x{ly}")));
        }
        Ok(Self { nx, ny, lx, ly })
    }

    pub fn dx(&self) -> f64 {
        self.lx / (self.nx - 1) as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / (self.ny - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn position(&self, idx: usize) -> (f64, f64) {
        let (i, j) = self.coords(idx);
        (i as f64 * self.dx(), j as f64 * self.dy())
    }

    /// Node whose control volume contains `(x, y)`.
    pub fn nearest_node(&self, x: f64, y: f64) -> Result<usize> {
        let eps = 1e-9 * (self.lx + self.ly);
        if !(x >= -eps && x <= self.lx + eps && y >= -eps && y <= self.ly + eps) {
            return Err(invalid(format!("point ({x}, {y}) outside the domain")));
        }
        let i = ((x / self.dx()).round() as usize).min(self.nx - 1);
        let j = ((y / self.dy()).round() as usize).min(self.ny - 1);
        Ok(self.index(i, j))
    }

    /// Control-volume width along x of column `i` (half cells on the boundary).
    pub fn cell_width(&self, i: usize) -> f64 {
        if i == 0 || i == self.nx - 1 {
            0.5 * self.dx()
        } else {
            self.dx()
        }
    }

    pub fn cell_height(&self, j: usize) -> f64 {
        if j == 0 || j == self.ny - 1 {
            0.5 * self.dy()
        } else {
            self.dy()
        }
    }

    /// Control-volume areas; they sum to `lx * ly`.
    pub fn cell_areas(&self) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let (i, j) = self.coords(k);
                self.cell_width(i) * self.cell_height(j)
            })
            .collect()
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarField {
    grid: Grid2D,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                what: "field values",
                expected: grid.len(),
                found: values.len(),
            });
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("field value at node {k} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|k| {
                let (x, y) = grid.position(k);
                f(x, y)
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}
