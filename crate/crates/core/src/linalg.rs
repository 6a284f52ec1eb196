//! Sparse and banded solvers for the grid discretizations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists; duplicate columns are summed.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|(c, _)| *c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                if last == Some(c) {
                    *vals.last_mut().expect("previous entry") += v;
                } else {
                    col_idx.push(c);
                    vals.push(v);
                    last = Some(c);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).find(|(c, _)| *c == i).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(i) {
                row[c] += v;
            }
        }
        d
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    /// Relative residual tolerance `|b - Ax| / |b|`.
    pub rel_tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    #[serde(default)]
    pub max_iter: Option<usize>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            max_iter: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned conjugate gradients for a symmetric positive-definite
/// system. `x` holds the initial guess on entry and the solution on exit.
pub fn pcg(a: &CsrMatrix, b: &[f64], x: &mut [f64], opts: &SolverOptions) -> Result<SolveStats> {
    let n = a.n();
    let max_iter = opts.max_iter.unwrap_or(10 * n);
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|d| if *d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    a.mul_vec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt() / b_norm;
    let mut it = 0;
    while res > opts.rel_tol {
        if it >= max_iter {
            return Err(Error::NotConverged {
                iterations: it,
                residual: res,
            });
        }
        a.mul_vec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Numeric(format!(
                "matrix is not positive definite (p'Ap = {pap:.3e})"
            )));
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt() / b_norm;
        it += 1;
    }
    Ok(SolveStats {
        iterations: it,
        rel_residual: res,
    })
}

/// Band matrix factored in place by LU without pivoting.
///
/// Only valid for matrices that need no pivoting, e.g. column diagonally
/// dominant M-matrices from upwind transport discretizations.
#[derive(Clone, Debug)]
pub struct BandLu {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandLu {
    /// Factors a matrix with lower and upper bandwidth `bw`.
    pub fn factor(a: &CsrMatrix, bw: usize) -> Result<Self> {
        let n = a.n();
        let width = 2 * bw + 1;
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            for (c, v) in a.row(i) {
                if c + bw < i || c > i + bw {
                    return Err(Error::Setup(format!(
                        "entry ({i}, {c}) outside bandwidth {bw}"
                    )));
                }
                data[i * width + (c + bw - i)] += v;
            }
        }
        let at = |i: usize, j: usize| i * width + (j + bw - i);
        for k in 0..n {
            let pivot = data[at(k, k)];
            if pivot.abs() < f64::MIN_POSITIVE || !pivot.is_finite() {
                return Err(Error::Numeric(format!("zero pivot at row {k}")));
            }
            let iend = (k + bw).min(n - 1);
            let jend = iend;
            for i in k + 1..=iend {
                let l = data[at(i, k)] / pivot;
                if l == 0.0 {
                    continue;
                }
                data[at(i, k)] = l;
                for j in k + 1..=jend {
                    data[at(i, j)] -= l * data[at(k, j)];
                }
            }
        }
        Ok(Self { n, bw, data })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let width = 2 * bw + 1;
        let at = |i: usize, j: usize| i * width + (j + bw - i);
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            let mut s = x[i];
            for j in j0..i {
                s -= self.data[at(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let jend = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in i + 1..=jend {
                s -= self.data[at(i, j)] * x[j];
            }
            x[i] = s / self.data[at(i, i)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        CsrMatrix::from_rows(
            (0..n)
                .map(|i| {
                    let mut row = vec![(i, 2.0 + shift)];
                    if i > 0 {
                        row.push((i - 1, -1.0));
                    }
                    if i + 1 < n {
                        row.push((i + 1, -1.0));
                    }
                    row
                })
                .collect(),
        )
    }

    #[test]
    fn pcg_solves_spd() {
        let a = laplacian_1d(50, 0.01);
        let truth: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; 50];
        a.mul_vec(&truth, &mut b);
        let mut x = vec![0.0; 50];
        let stats = pcg(&a, &b, &mut x, &SolverOptions::default()).unwrap();
        assert!(stats.rel_residual <= 1e-10);
        for (u, v) in x.iter().zip(&truth) {
            assert!((u - v).abs() < 1e-7);
        }
    }

    #[test]
    fn pcg_reports_non_convergence() {
        let a = laplacian_1d(200, 0.0);
        let b = vec![1.0; 200];
        let mut x = vec![0.0; 200];
        let opts = SolverOptions {
            rel_tol: 1e-12,
            max_iter: Some(3),
        };
        assert!(matches!(pcg(&a, &b, &mut x, &opts), Err(Error::NotConverged { iterations: 3, .. })));
    }

    #[test]
    fn band_lu_matches_product() {
        // Nonsymmetric, column dominant.
        let n = 30;
        let bw = 5;
        let rows = (0..n)
            .map(|i| {
                let mut row = vec![(i, 4.0)];
                if i >= bw {
                    row.push((i - bw, -1.5));
                }
                if i >= 1 {
                    row.push((i - 1, -0.5));
                }
                if i + 1 < n {
                    row.push((i + 1, -0.7));
                }
                row
            })
            .collect();
        let a = CsrMatrix::from_rows(rows);
        let truth: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let mut b = vec![0.0; n];
        a.mul_vec(&truth, &mut b);
        let lu = BandLu::factor(&a, bw).unwrap();
        lu.solve_in_place(&mut b);
        for (u, v) in b.iter().zip(&truth) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
