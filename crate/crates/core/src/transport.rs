//! Advection-dispersion transport of a conservative solute.
//!
//! Node-centred finite volumes with unit aquifer thickness. Each step:
//!
//! 1. the point source deposits its mass into the four surrounding nodes with
//!    bilinear weights, so outputs vary continuously with the source location;
//! 2. the cross-dispersion terms (`D12`) are applied explicitly, with outgoing
//!    fluxes scaled down so no control volume gives away more mass than it holds;
//! 3. upwind advection and the axis dispersion terms (`D11`, `D22`) are solved
//!    implicitly. That matrix is a column diagonally dominant M-matrix, so the
//!    update keeps concentrations nonnegative.
//!
//! Solute leaves by advection through the open (fixed-head) x boundaries only;
//! dispersive flux is zero on every boundary. Inflowing water is clean.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::{Grid2D, ScalarField};
use crate::linalg::{BandLu, CsrMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct DispersionTensorField {
    pub d11: ScalarField,
    pub d22: ScalarField,
    pub d12: ScalarField,
}

/// Hydrodynamic dispersion tensor at every node; zero where the velocity vanishes.
pub fn dispersion_tensor(
    vx: &ScalarField,
    vy: &ScalarField,
    alpha_l: f64,
    alpha_t: f64,
) -> Result<DispersionTensorField> {
    if !(alpha_l >= 0.0 && alpha_t >= 0.0) {
        return Err(invalid("dispersivities must be nonnegative"));
    }
    let g = *vx.grid();
    if vy.grid() != &g {
        return Err(invalid("velocity components live on different grids"));
    }
    let n = g.len();
    let (mut d11, mut d22, mut d12) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let (v1, v2) = (vx.values()[k], vy.values()[k]);
        let norm = v1.hypot(v2);
        if norm == 0.0 {
            continue;
        }
        d11[k] = (alpha_l * v1 * v1 + alpha_t * v2 * v2) / norm;
        d22[k] = (alpha_l * v2 * v2 + alpha_t * v1 * v1) / norm;
        d12[k] = (alpha_l - alpha_t) * v1 * v2 / norm;
    }
    Ok(DispersionTensorField {
        d11: ScalarField::new(g, d11)?,
        d22: ScalarField::new(g, d22)?,
        d12: ScalarField::new(g, d12)?,
    })
}

/// Point source with a piecewise-constant mass loading rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MassSource {
    pub x: f64,
    pub y: f64,
    /// Rate `rates[k]` is active on `[start + k * interval, start + (k + 1) * interval)`.
    pub rates: Vec<f64>,
    pub start: f64,
    pub interval: f64,
}

impl MassSource {
    /// Mass released over `[t0, t1)`.
    pub fn mass_between(&self, t0: f64, t1: f64) -> f64 {
        self.rates
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let a = self.start + k as f64 * self.interval;
                let b = a + self.interval;
                let overlap = (t1.min(b) - t0.max(a)).max(0.0);
                s * overlap
            })
            .sum()
    }
}

#[derive(Clone, Debug)]
pub struct TransportProblem {
    pub grid: Grid2D,
    pub porosity: f64,
    pub alpha_l: f64,
    pub alpha_t: f64,
    pub vx: ScalarField,
    pub vy: ScalarField,
    pub source: MassSource,
    pub initial: ScalarField,
    pub output_times: Vec<f64>,
    pub dt: f64,
    /// Whether solute may leave through the `x = 0` and `x = lx` boundaries.
    pub open_x_boundaries: bool,
}

/// Mass bookkeeping for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepBudget {
    pub t_end: f64,
    pub mass_before: f64,
    pub mass_after: f64,
    pub source_mass: f64,
    pub outflow_mass: f64,
}

impl StepBudget {
    /// `|dM - source + outflow|` relative to the mass handled in the step.
    pub fn relative_error(&self) -> f64 {
        let residual = self.mass_after - self.mass_before - self.source_mass + self.outflow_mass;
        let scale = (self.mass_before + self.source_mass).max(f64::MIN_POSITIVE);
        residual.abs() / scale
    }
}

#[derive(Clone, Debug)]
pub struct TransportSolution {
    pub concentrations: Vec<ScalarField>,
    pub budget: Vec<StepBudget>,
}

impl TransportProblem {
    fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            return Err(invalid("porosity must lie in (0, 1)"));
        }
        if !(self.alpha_t >= 0.0 && self.alpha_l >= self.alpha_t) {
            return Err(invalid("dispersivities must satisfy alpha_l >= alpha_t >= 0"));
        }
        for f in [&self.vx, &self.vy, &self.initial] {
            if f.grid() != g {
                return Err(invalid("transport fields must share the problem grid"));
            }
        }
        if self.initial.values().iter().any(|c| *c < 0.0) {
            return Err(invalid("initial concentration must be nonnegative"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("transport time step must be positive"));
        }
        let s = &self.source;
        if !(s.x >= 0.0 && s.x <= g.lx && s.y >= 0.0 && s.y <= g.ly) {
            return Err(invalid(format!("source ({}, {}) outside the domain", s.x, s.y)));
        }
        if s.rates.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(invalid("source loading rates must be nonnegative"));
        }
        if !(s.interval > 0.0) {
            return Err(invalid("source interval must be positive"));
        }
        let mut prev = -f64::INFINITY;
        for &t in &self.output_times {
            if !(t >= 0.0 && t > prev && t.is_finite()) {
                return Err(invalid("output times must be nonnegative and strictly increasing"));
            }
            prev = t;
        }
        Ok(())
    }
}

/// Precomputed face data for the discretization.
struct Stencil {
    grid: Grid2D,
    /// Pore volume of each control volume.
    pore_volume: Vec<f64>,
    /// Volumetric advective flux across x-faces `(i, j) -> (i + 1, j)`, indexed by the left node.
    fx: Vec<f64>,
    /// Same for y-faces `(i, j) -> (i, j + 1)`, indexed by the lower node.
    fy: Vec<f64>,
    /// Dispersive conductances `theta * D * len / dist` for x- and y-faces.
    gx: Vec<f64>,
    gy: Vec<f64>,
    /// Face-averaged cross coefficients times face length.
    cx: Vec<f64>,
    cy: Vec<f64>,
    /// Outflow volumetric rate through the open boundary at each node.
    boundary_out: Vec<f64>,
}

impl Stencil {
    fn new(p: &TransportProblem, disp: &DispersionTensorField) -> Self {
        let g = p.grid;
        let n = g.len();
        let theta = p.porosity;
        let areas = g.cell_areas();
        let (vx, vy) = (p.vx.values(), p.vy.values());
        let (d11, d22, d12) = (disp.d11.values(), disp.d22.values(), disp.d12.values());
        let mut s = Stencil {
            grid: g,
            pore_volume: areas.iter().map(|a| theta * a).collect(),
            fx: vec![0.0; n],
            fy: vec![0.0; n],
            gx: vec![0.0; n],
            gy: vec![0.0; n],
            cx: vec![0.0; n],
            cy: vec![0.0; n],
            boundary_out: vec![0.0; n],
        };
        for j in 0..g.ny {
            for i in 0..g.nx {
                let a = g.index(i, j);
                if i + 1 < g.nx {
                    let b = g.index(i + 1, j);
                    let len = g.cell_height(j);
                    s.fx[a] = theta * 0.5 * (vx[a] + vx[b]) * len;
                    s.gx[a] = theta * 0.5 * (d11[a] + d11[b]) * len / g.dx();
                    s.cx[a] = theta * 0.5 * (d12[a] + d12[b]) * len;
                }
                if j + 1 < g.ny {
                    let b = g.index(i, j + 1);
                    let len = g.cell_width(i);
                    s.fy[a] = theta * 0.5 * (vy[a] + vy[b]) * len;
                    s.gy[a] = theta * 0.5 * (d22[a] + d22[b]) * len / g.dy();
                    s.cy[a] = theta * 0.5 * (d12[a] + d12[b]) * len;
                }
                if p.open_x_boundaries {
                    let len = g.cell_height(j);
                    if i == 0 && vx[a] < 0.0 {
                        s.boundary_out[a] += theta * -vx[a] * len;
                    }
                    if i == g.nx - 1 && vx[a] > 0.0 {
                        s.boundary_out[a] += theta * vx[a] * len;
                    }
                }
            }
        }
        s
    }

    /// Implicit operator `pore_volume / dt + advection + axis dispersion`.
    fn implicit_matrix(&self, dt: f64) -> CsrMatrix {
        let g = &self.grid;
        let mut rows: Vec<Vec<(usize, f64)>> = (0..g.len())
            .map(|k| vec![(k, self.pore_volume[k] / dt + self.boundary_out[k])])
            .collect();
        let mut link = |a: usize, b: usize, flux: f64, cond: f64| {
            let (out_a, out_b) = (flux.max(0.0), (-flux).max(0.0));
            rows[a].push((a, out_a + cond));
            rows[a].push((b, -out_b - cond));
            rows[b].push((b, out_b + cond));
            rows[b].push((a, -out_a - cond));
        };
        for j in 0..g.ny {
            for i in 0..g.nx {
                let a = g.index(i, j);
                if i + 1 < g.nx {
                    link(a, g.index(i + 1, j), self.fx[a], self.gx[a]);
                }
                if j + 1 < g.ny {
                    link(a, g.index(i, j + 1), self.fy[a], self.gy[a]);
                }
            }
        }
        CsrMatrix::from_rows(rows)
    }

    fn has_cross_terms(&self) -> bool {
        self.cx.iter().chain(&self.cy).any(|c| *c != 0.0)
    }

    /// Applies the limited explicit cross-dispersion update to `mass` in place.
    fn cross_dispersion(&self, conc: &[f64], mass: &mut [f64], dt: f64) {
        let g = &self.grid;
        let (dx, dy) = (g.dx(), g.dy());
        let ddy = |i: usize, j: usize| -> f64 {
            if j == 0 {
                (conc[g.index(i, 1)] - conc[g.index(i, 0)]) / dy
            } else if j == g.ny - 1 {
                (conc[g.index(i, j)] - conc[g.index(i, j - 1)]) / dy
            } else {
                (conc[g.index(i, j + 1)] - conc[g.index(i, j - 1)]) / (2.0 * dy)
            }
        };
        let ddx = |i: usize, j: usize| -> f64 {
            if i == 0 {
                (conc[g.index(1, j)] - conc[g.index(0, j)]) / dx
            } else if i == g.nx - 1 {
                (conc[g.index(i, j)] - conc[g.index(i - 1, j)]) / dx
            } else {
                (conc[g.index(i + 1, j)] - conc[g.index(i - 1, j)]) / (2.0 * dx)
            }
        };
        // Mass moved a -> b over the step (negative means b -> a).
        let mut faces: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..g.ny {
            for i in 0..g.nx {
                let a = g.index(i, j);
                if i + 1 < g.nx && self.cx[a] != 0.0 {
                    let grad = 0.5 * (ddy(i, j) + ddy(i + 1, j));
                    faces.push((a, g.index(i + 1, j), -self.cx[a] * grad * dt));
                }
                if j + 1 < g.ny && self.cy[a] != 0.0 {
                    let grad = 0.5 * (ddx(i, j) + ddx(i, j + 1));
                    faces.push((a, g.index(i, j + 1), -self.cy[a] * grad * dt));
                }
            }
        }
        let mut outgoing = vec![0.0; mass.len()];
        for &(a, b, m) in &faces {
            if m > 0.0 {
                outgoing[a] += m;
            } else {
                outgoing[b] -= m;
            }
        }
        let ratio: Vec<f64> = outgoing
            .iter()
            .zip(mass.iter())
            .map(|(out, avail)| if *out > *avail { (avail / out).max(0.0) } else { 1.0 })
            .collect();
        for (a, b, m) in faces {
            let moved = if m > 0.0 { m * ratio[a] } else { m * ratio[b] };
            mass[a] -= moved;
            mass[b] += moved;
        }
        for v in mass.iter_mut() {
            // Round-off only; the limiter keeps every volume nonnegative.
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Concentrations at the requested output times.
pub fn solve_transport(p: &TransportProblem) -> Result<Vec<ScalarField>> {
    Ok(solve_transport_with_budget(p)?.concentrations)
}

/// Nodes of the cell containing `(x, y)` with their bilinear weights (summing to one).
fn bilinear_weights(g: &Grid2D, x: f64, y: f64) -> Vec<(usize, f64)> {
    let locate = |v: f64, h: f64, n: usize| {
        let s = (v / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        (i, s - i as f64)
    };
    let (i, fx) = locate(x, g.dx(), g.nx);
    let (j, fy) = locate(y, g.dy(), g.ny);
    [
        (g.index(i, j), (1.0 - fx) * (1.0 - fy)),
        (g.index(i + 1, j), fx * (1.0 - fy)),
        (g.index(i, j + 1), (1.0 - fx) * fy),
        (g.index(i + 1, j + 1), fx * fy),
    ]
    .into_iter()
    .filter(|(_, w)| *w > 0.0)
    .collect()
}

/// Like [`solve_transport`], also returning the per-step mass budget.
pub fn solve_transport_with_budget(p: &TransportProblem) -> Result<TransportSolution> {
    p.validate()?;
    let g = p.grid;
    let disp = dispersion_tensor(&p.vx, &p.vy, p.alpha_l, p.alpha_t)?;
    let st = Stencil::new(p, &disp);
    let source_nodes = bilinear_weights(&g, p.source.x, p.source.y);
    let full = BandLu::factor(&st.implicit_matrix(p.dt), g.nx)?;
    let cross = st.has_cross_terms();

    let mut conc = p.initial.values().to_vec();
    let mut mass: Vec<f64> = conc.iter().zip(&st.pore_volume).map(|(c, v)| c * v).collect();
    let total = |m: &[f64]| m.iter().sum::<f64>();
    let mut out = Vec::with_capacity(p.output_times.len());
    let mut budget = Vec::new();
    let mut t = 0.0;
    let eps = 1e-9 * p.dt;
    for &t_out in &p.output_times {
        while t < t_out - eps {
            let step = if t + p.dt <= t_out + eps { p.dt } else { t_out - t };
            let t_next = if (t + step - t_out).abs() <= eps { t_out } else { t + step };
            let mass_before = total(&mass);
            let src = p.source.mass_between(t, t_next);
            for &(node, w) in &source_nodes {
                mass[node] += w * src;
            }
            if cross {
                let c: Vec<f64> = mass.iter().zip(&st.pore_volume).map(|(m, v)| m / v).collect();
                st.cross_dispersion(&c, &mut mass, step);
            }
            // Right-hand side: pore_volume / dt * C* = mass / dt.
            let mut rhs: Vec<f64> = mass.iter().map(|m| m / step).collect();
            if (step - p.dt).abs() <= eps {
                full.solve_in_place(&mut rhs);
            } else {
                BandLu::factor(&st.implicit_matrix(step), g.nx)?.solve_in_place(&mut rhs);
            }
            conc = rhs;
            for c in conc.iter_mut() {
                if *c < 0.0 {
                    *c = 0.0;
                }
            }
            let outflow: f64 = st.boundary_out.iter().zip(&conc).map(|(q, c)| q * c * step).sum();
            for (m, (c, v)) in mass.iter_mut().zip(conc.iter().zip(&st.pore_volume)) {
                *m = c * v;
            }
            budget.push(StepBudget {
                t_end: t_next,
                mass_before,
                mass_after: total(&mass),
                source_mass: src,
                outflow_mass: outflow,
            });
            t = t_next;
        }
        out.push(ScalarField::new(g, conc.clone())?);
    }
    Ok(TransportSolution {
        concentrations: out,
        budget,
    })
}

/// Dissolved mass `sum(theta * A * C)` of a concentration field.
pub fn dissolved_mass(c: &ScalarField, porosity: f64) -> f64 {
    c.grid()
        .cell_areas()
        .iter()
        .zip(c.values())
        .map(|(a, c)| porosity * a * c)
        .sum()
}
