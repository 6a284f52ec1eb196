//! Two-dimensional confined groundwater flow on a node-centred grid.
//!
//! Five-point finite differences with harmonic-mean inter-node conductance.
//! Columns `i = 0` and `i = nx - 1` may carry fixed heads; top and bottom rows
//! are no-flux. Wells are point sources assigned to a single node (positive
//! rate injects). Aquifer thickness is one length unit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid2D, ScalarField};
use crate::linalg::{pcg, CsrMatrix, SolverOptions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub node: usize,
    /// Volumetric rate; positive injects, negative pumps.
    pub rate: f64,
}

#[derive(Clone, Debug)]
pub struct FlowProblem {
    pub grid: Grid2D,
    pub conductivity: ScalarField,
    pub left_head: Option<f64>,
    pub right_head: Option<f64>,
    pub wells: Vec<Well>,
    pub specific_storage: Option<f64>,
    pub initial_head: Option<ScalarField>,
    pub solver: SolverOptions,
}

impl FlowProblem {
    /// Fixed heads left and right, no wells, steady.
    pub fn steady(conductivity: ScalarField, left_head: f64, right_head: f64) -> Self {
        Self {
            grid: *conductivity.grid(),
            conductivity,
            left_head: Some(left_head),
            right_head: Some(right_head),
            wells: Vec::new(),
            specific_storage: None,
            initial_head: None,
            solver: SolverOptions::default(),
        }
    }

    fn fixed_head(&self, node: usize) -> Option<f64> {
        let (i, _) = self.grid.coords(node);
        if i == 0 {
            self.left_head
        } else if i == self.grid.nx - 1 {
            self.right_head
        } else {
            None
        }
    }

    fn validate(&self) -> Result<()> {
        if self.conductivity.grid() != &self.grid {
            return Err(invalid("conductivity grid differs from problem grid"));
        }
        if self.conductivity.values().iter().any(|k| !(*k > 0.0)) {
            return Err(invalid("conductivity must be positive everywhere"));
        }
        for h in [self.left_head, self.right_head].into_iter().flatten() {
            if !h.is_finite() {
                return Err(invalid("fixed heads must be finite"));
            }
        }
        if self.left_head.is_none() && self.right_head.is_none() {
            return Err(Error::Setup(
                "no fixed-head boundary: the flow system is singular".into(),
            ));
        }
        for w in &self.wells {
            if w.node >= self.grid.len() {
                return Err(invalid(format!("well node {} outside the grid", w.node)));
            }
            if self.fixed_head(w.node).is_some() {
                return Err(invalid(format!("well node {} lies on a fixed-head boundary", w.node)));
            }
            if !w.rate.is_finite() {
                return Err(invalid("well rate must be finite"));
            }
        }
        Ok(())
    }

    /// Conductance-weighted links `(p, q, T_pq)` between orthogonal neighbours.
    fn links(&self) -> Vec<(usize, usize, f64)> {
        let g = &self.grid;
        let k = self.conductivity.values();
        let harmonic = |a: f64, b: f64| 2.0 * a * b / (a + b);
        let mut out = Vec::with_capacity(2 * g.len());
        for j in 0..g.ny {
            for i in 0..g.nx {
                let p = g.index(i, j);
                if i + 1 < g.nx {
                    let q = g.index(i + 1, j);
                    out.push((p, q, harmonic(k[p], k[q]) * g.cell_height(j) / g.dx()));
                }
                if j + 1 < g.ny {
                    let q = g.index(i, j + 1);
                    out.push((p, q, harmonic(k[p], k[q]) * g.cell_width(i) / g.dy()));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadSolution {
    Steady(ScalarField),
    Transient {
        times: Vec<f64>,
        heads: Vec<ScalarField>,
    },
}

impl HeadSolution {
    /// Steady field, or the final transient snapshot.
    pub fn last(&self) -> &ScalarField {
        match self {
            HeadSolution::Steady(h) => h,
            HeadSolution::Transient { heads, .. } => heads.last().expect("at least the initial head"),
        }
    }
}

/// Assembled system over the free (non-fixed-head) nodes.
struct System {
    free: Vec<usize>,
    slot: Vec<Option<usize>>,
    matrix: CsrMatrix,
    rhs: Vec<f64>,
    storage: Vec<f64>,
}

fn assemble(p: &FlowProblem, storage_over_dt: f64) -> System {
    let g = &p.grid;
    let n = g.len();
    let mut slot = vec![None; n];
    let mut free = Vec::new();
    for node in 0..n {
        if p.fixed_head(node).is_none() {
            slot[node] = Some(free.len());
            free.push(node);
        }
    }
    let areas = g.cell_areas();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::with_capacity(5); free.len()];
    let mut rhs = vec![0.0; free.len()];
    let storage: Vec<f64> = free.iter().map(|&node| storage_over_dt * areas[node]).collect();
    for (r, s) in storage.iter().enumerate() {
        rows[r].push((r, *s));
    }
    for (a, b, t) in p.links() {
        match (slot[a], slot[b]) {
            (Some(ra), Some(rb)) => {
                rows[ra].push((ra, t));
                rows[ra].push((rb, -t));
                rows[rb].push((rb, t));
                rows[rb].push((ra, -t));
            }
            (Some(ra), None) => {
                rows[ra].push((ra, t));
                rhs[ra] += t * p.fixed_head(b).expect("fixed node");
            }
            (None, Some(rb)) => {
                rows[rb].push((rb, t));
                rhs[rb] += t * p.fixed_head(a).expect("fixed node");
            }
            (None, None) => {}
        }
    }
    for w in &p.wells {
        if let Some(r) = slot[w.node] {
            rhs[r] += w.rate;
        }
    }
    System {
        free,
        slot,
        matrix: CsrMatrix::from_rows(rows),
        rhs,
        storage,
    }
}

/// Linear-in-x interpolation between the boundary heads, used as the initial guess.
fn linear_guess(p: &FlowProblem) -> Vec<f64> {
    let g = &p.grid;
    let (l, r) = match (p.left_head, p.right_head) {
        (Some(l), Some(r)) => (l, r),
        (Some(h), None) | (None, Some(h)) => (h, h),
        (None, None) => (0.0, 0.0),
    };
    (0..g.len())
        .map(|k| {
            let (i, _) = g.coords(k);
            let s = i as f64 / (g.nx - 1) as f64;
            l + (r - l) * s
        })
        .collect()
}

fn scatter(p: &FlowProblem, sys: &System, x: &[f64], template: &[f64]) -> Result<ScalarField> {
    let mut h = template.to_vec();
    for (node, v) in h.iter_mut().enumerate() {
        match sys.slot[node] {
            Some(r) => *v = x[r],
            None => *v = p.fixed_head(node).expect("fixed node"),
        }
    }
    ScalarField::new(p.grid, h)
}

pub fn solve_steady_flow(p: &FlowProblem) -> Result<HeadSolution> {
    p.validate()?;
    let sys = assemble(p, 0.0);
    let guess = linear_guess(p);
    let mut x: Vec<f64> = sys.free.iter().map(|&n| guess[n]).collect();
    pcg(&sys.matrix, &sys.rhs, &mut x, &p.solver)?;
    Ok(HeadSolution::Steady(scatter(p, &sys, &x, &guess)?))
}

/// Backward-Euler transient flow from `initial_head` to `t_end` with step `dt`.
///
/// Returns the head at `t = 0` and after every step. If `t_end` is not a
/// multiple of `dt` the last step is shortened.
pub fn solve_transient_flow(p: &FlowProblem, t_end: f64, dt: f64) -> Result<HeadSolution> {
    p.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid(format!("time step must be positive, got {dt}")));
    }
    if !(t_end >= 0.0 && t_end.is_finite()) {
        return Err(invalid(format!("end time must be nonnegative, got {t_end}")));
    }
    let ss = p
        .specific_storage
        .ok_or_else(|| invalid("transient flow needs a specific storage"))?;
    if !(ss > 0.0) {
        return Err(invalid("specific storage must be positive"));
    }
    let init = p
        .initial_head
        .as_ref()
        .ok_or_else(|| invalid("transient flow needs an initial head"))?;
    if init.grid() != &p.grid {
        return Err(invalid("initial head grid differs from problem grid"));
    }

    let full_steps = ((t_end / dt) * (1.0 + 1e-12)).floor() as usize;
    let remainder = t_end - full_steps as f64 * dt;
    let mut step_sizes = vec![dt; full_steps];
    if remainder > 1e-9 * dt {
        step_sizes.push(remainder);
    }

    let mut sys = assemble(p, ss / dt);
    let mut current_dt = dt;
    let mut head = init.values().to_vec();
    for (node, v) in head.iter_mut().enumerate() {
        if let Some(h) = p.fixed_head(node) {
            *v = h;
        }
    }
    let mut x: Vec<f64> = sys.free.iter().map(|&n| head[n]).collect();
    let mut times = vec![0.0];
    let mut heads = vec![ScalarField::new(p.grid, head.clone())?];
    let mut b = vec![0.0; sys.free.len()];
    for (k, &h_dt) in step_sizes.iter().enumerate() {
        if h_dt != current_dt {
            sys = assemble(p, ss / h_dt);
            current_dt = h_dt;
        }
        for r in 0..b.len() {
            b[r] = sys.rhs[r] + sys.storage[r] * x[r];
        }
        pcg(&sys.matrix, &b, &mut x, &p.solver)?;
        let t = if k + 1 == step_sizes.len() {
            t_end
        } else {
            (k + 1) as f64 * dt
        };
        let field = scatter(p, &sys, &x, &head)?;
        head.copy_from_slice(field.values());
        times.push(t);
        heads.push(field);
    }
    Ok(HeadSolution::Transient { times, heads })
}

/// Net inflow through the fixed-head boundaries for a head field.
pub fn boundary_inflow(p: &FlowProblem, head: &ScalarField) -> f64 {
    let h = head.values();
    p.links()
        .into_iter()
        .map(|(a, b, t)| match (p.fixed_head(a).is_some(), p.fixed_head(b).is_some()) {
            (true, false) => t * (h[a] - h[b]),
            (false, true) => t * (h[b] - h[a]),
            _ => 0.0,
        })
        .sum()
}

/// Pore-water velocity `v = -(K / porosity) grad h`.
///
/// Central differences inside the domain, one-sided differences on the boundary.
pub fn darcy_velocity(
    head: &ScalarField,
    conductivity: &ScalarField,
    porosity: f64,
) -> Result<(ScalarField, ScalarField)> {
    if !(porosity > 0.0 && porosity < 1.0) {
        return Err(invalid(format!("porosity must lie in (0, 1), got {porosity}")));
    }
    let g = *head.grid();
    if conductivity.grid() != &g {
        return Err(invalid("head and conductivity grids differ"));
    }
    let (dx, dy) = (g.dx(), g.dy());
    let mut vx = vec![0.0; g.len()];
    let mut vy = vec![0.0; g.len()];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.index(i, j);
            let dhdx = if i == 0 {
                (head.at(1, j) - head.at(0, j)) / dx
            } else if i == g.nx - 1 {
                (head.at(i, j) - head.at(i - 1, j)) / dx
            } else {
                (head.at(i + 1, j) - head.at(i - 1, j)) / (2.0 * dx)
            };
            let dhdy = if j == 0 {
                (head.at(i, 1) - head.at(i, 0)) / dy
            } else if j == g.ny - 1 {
                (head.at(i, j) - head.at(i, j - 1)) / dy
            } else {
                (head.at(i, j + 1) - head.at(i, j - 1)) / (2.0 * dy)
            };
            let c = conductivity.values()[k] / porosity;
            vx[k] = -c * dhdx;
            vy[k] = -c * dhdy;
        }
    }
    Ok((ScalarField::new(g, vx)?, ScalarField::new(g, vy)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn homogeneous(nx: usize, ny: usize, lx: f64, ly: f64, k: f64) -> ScalarField {
        ScalarField::constant(Grid2D::new(nx, ny, lx, ly).unwrap(), k)
    }

    #[test]
    fn linear_profile_for_homogeneous_medium() {
        let p = FlowProblem::steady(homogeneous(81, 41, 20.0, 10.0, 3.0), 12.0, 11.0);
        let h = solve_steady_flow(&p).unwrap();
        let g = p.grid;
        let dev = (0..g.len())
            .map(|k| {
                let (x, _) = g.position(k);
                (h.last().values()[k] - (12.0 - x / 20.0)).abs()
            })
            .fold(0.0, f64::max);
        assert!(dev < 1e-8, "max deviation {dev}");
    }

    #[test]
    fn equal_heads_give_uniform_field() {
        let g = Grid2D::new(9, 7, 4.0, 3.0).unwrap();
        let k = ScalarField::from_fn(g, |x, y| 1.0 + x * y).unwrap();
        let h = solve_steady_flow(&FlowProblem::steady(k, 5.0, 5.0)).unwrap();
        assert!(h.last().values().iter().all(|v| (v - 5.0).abs() < 1e-9));
    }

    #[test]
    fn no_fixed_heads_is_setup_error() {
        let mut p = FlowProblem::steady(homogeneous(4, 4, 1.0, 1.0, 1.0), 1.0, 0.0);
        p.left_head = None;
        p.right_head = None;
        assert!(matches!(solve_steady_flow(&p), Err(Error::Setup(_))));
    }

    #[test]
    fn non_convergence_is_reported() {
        let mut p = FlowProblem::steady(homogeneous(30, 30, 1.0, 1.0, 1.0), 1.0, 0.0);
        p.wells.push(Well { node: 15 * 30 + 15, rate: 1.0 });
        p.solver.max_iter = Some(2);
        assert!(matches!(solve_steady_flow(&p), Err(Error::NotConverged { .. })));
    }

    #[test]
    fn series_conductance_is_harmonic() {
        // One row of free nodes between two fixed columns; K jumps at the middle.
        // Node-centred links: left half-link K1, middle link harmonic(K1, K2), right K2.
        let g = Grid2D::new(3, 2, 2.0, 1.0).unwrap();
        let (k1, k2) = (1.0, 9.0);
        let k = ScalarField::new(g, vec![k1, k1, k2, k1, k1, k2]).unwrap();
        let h = solve_steady_flow(&FlowProblem::steady(k, 1.0, 0.0)).unwrap();
        // Links: (0,1) harmonic(k1,k1) = k1; (1,2) harmonic(k1,k2).
        let t01 = k1;
        let t12 = 2.0 * k1 * k2 / (k1 + k2);
        let mid = t01 * 1.0 / (t01 + t12);
        assert!((h.last().at(1, 0) - mid).abs() < 1e-10);
        assert!((h.last().at(1, 1) - mid).abs() < 1e-10);
        // Arithmetic averaging would give a visibly different head.
        let t12_arith = 0.5 * (k1 + k2);
        assert!((mid - t01 / (t01 + t12_arith)).abs() > 0.05);
    }

    #[test]
    fn darcy_velocity_linear_head() {
        let g = Grid2D::new(21, 11, 20.0, 10.0).unwrap();
        let h = ScalarField::from_fn(g, |x, _| 12.0 - x / 20.0).unwrap();
        let k = ScalarField::constant(g, 1.0);
        let (vx, vy) = darcy_velocity(&h, &k, 0.25).unwrap();
        assert!(vx.values().iter().all(|v| (v - 0.2).abs() < 1e-12));
        assert!(vy.values().iter().all(|v| v.abs() < 1e-12));
        let flat = ScalarField::constant(g, 3.0);
        let (vx, vy) = darcy_velocity(&flat, &k, 0.25).unwrap();
        assert!(vx.values().iter().chain(vy.values()).all(|v| *v == 0.0));
        assert!(darcy_velocity(&h, &k, 1.0).is_err());
        assert!(darcy_velocity(&h, &k, 0.0).is_err());
    }

    #[test]
    fn transient_rejects_bad_inputs() {
        let mut p = FlowProblem::steady(homogeneous(5, 5, 1.0, 1.0, 1.0), 1.0, 0.0);
        assert!(solve_transient_flow(&p, 1.0, 0.1).is_err());
        p.specific_storage = Some(1e-4);
        p.initial_head = Some(ScalarField::constant(p.grid, 0.0));
        assert!(solve_transient_flow(&p, 1.0, 0.0).is_err());
        assert!(solve_transient_flow(&p, 1.0, -1.0).is_err());
        assert!(solve_transient_flow(&p, 1.0, 0.1).is_ok());
    }

    #[test]
    fn transient_time_stamps() {
        let mut p = FlowProblem::steady(homogeneous(5, 5, 1.0, 1.0, 1.0), 1.0, 0.0);
        p.specific_storage = Some(1e-2);
        p.initial_head = Some(ScalarField::constant(p.grid, 0.0));
        match solve_transient_flow(&p, 0.6, 0.1).unwrap() {
            HeadSolution::Transient { times, heads } => {
                assert_eq!(times.len(), 7);
                assert_eq!(heads.len(), 7);
                assert!((times[6] - 0.6).abs() < 1e-12);
                // Fixed heads are pinned at every stamp, including t = 0.
                for h in &heads {
                    assert_eq!(h.at(0, 2), 1.0);
                    assert_eq!(h.at(4, 2), 0.0);
                }
            }
            _ => panic!("expected transient"),
        }
        match solve_transient_flow(&p, 0.25, 0.1).unwrap() {
            HeadSolution::Transient { times, .. } => {
                assert_eq!(times.len(), 4);
                assert!((times[3] - 0.25).abs() < 1e-12);
            }
            _ => panic!("expected transient"),
        }
    }
}
