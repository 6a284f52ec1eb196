//! The two case studies: reference truth, synthetic observations, prior and forward model.

use anyhow::{bail, Context, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;

use ensmooth_core::flow::{darcy_velocity, solve_steady_flow, solve_transient_flow, FlowProblem, HeadSolution, Well};
use ensmooth_core::linalg::SolverOptions;
use ensmooth_core::param::{build_kl_basis, direct_sampling, generate_channel_ti, KlBasis, TrainingImage};
use ensmooth_core::smoother::{Bound, ForwardModel, ParamConstraints};
use ensmooth_core::transport::{solve_transport, MassSource, TransportProblem};
use ensmooth_core::{Ensemble, Grid2D, ObsKind, ObsLabel, ObservationSet, RngStream, ScalarField};

use crate::config::{CaseConfig, ChannelCase, ExperimentConfig, GaussianCase};

/// Reference run and its synthetic observations.
#[derive(Clone, Debug)]
pub struct CaseTruth {
    /// Log-conductivity for the Gaussian case, conductivity for the channel case.
    pub reference: ScalarField,
    /// Full true parameter vector.
    pub params: Vec<f64>,
    /// `(x_s, y_s, S_1, ...)` for the Gaussian case.
    pub source: Option<Vec<f64>>,
    pub observations: ObservationSet,
}

/// How a parameter vector maps to the field compared against the reference.
pub enum FieldMap {
    Kl(KlBasis),
    Direct(Grid2D),
}

impl FieldMap {
    pub fn grid(&self) -> &Grid2D {
        match self {
            FieldMap::Kl(b) => b.grid(),
            FieldMap::Direct(g) => g,
        }
    }

    pub fn field_values(&self, params: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            FieldMap::Kl(b) => b.realize_values(&params[..b.n_kl()])?,
            FieldMap::Direct(g) => params[..g.len()].to_vec(),
        })
    }
}

pub struct Case {
    pub truth: CaseTruth,
    pub prior: Ensemble,
    pub model: Box<dyn ForwardModel + Send>,
    pub constraints: ParamConstraints,
    pub field: FieldMap,
    /// Index of the first source parameter, if any.
    pub source_offset: Option<usize>,
}

/// Parameter layout `[xi_1..xi_nkl, x_s, y_s, S_1..S_n]`.
pub struct GaussianModel {
    basis: KlBasis,
    case: GaussianCase,
    wells: Vec<usize>,
    solver: SolverOptions,
}

impl GaussianModel {
    pub fn new(case: &GaussianCase, basis: KlBasis, solver: SolverOptions) -> Result<Self> {
        let g = *basis.grid();
        let mut wells = Vec::new();
        for &y in &case.wells_y {
            for &x in &case.wells_x {
                wells.push(g.nearest_node(x, y)?);
            }
        }
        Ok(Self {
            basis,
            case: case.clone(),
            wells,
            solver,
        })
    }

    pub fn basis(&self) -> &KlBasis {
        &self.basis
    }

    pub fn n_params(&self) -> usize {
        self.basis.n_kl() + 2 + self.case.source_truth.rates.len()
    }

    /// Monitoring-well labels in output order: heads, then concentrations grouped by time.
    pub fn labels(&self) -> Vec<ObsLabel> {
        let g = self.basis.grid();
        let at = |node: usize, kind, t| {
            let (x, y) = g.position(node);
            ObsLabel { kind, x, y, t }
        };
        let mut out: Vec<ObsLabel> = self.wells.iter().map(|&n| at(n, ObsKind::Head, None)).collect();
        for &t in &self.case.obs_times {
            out.extend(self.wells.iter().map(|&n| at(n, ObsKind::Concentration, Some(t))));
        }
        out
    }

    pub fn noise_std(&self) -> Vec<f64> {
        let nw = self.wells.len();
        let mut s = vec![self.case.head_noise_std; nw];
        s.extend(std::iter::repeat_n(self.case.conc_noise_std, nw * self.case.obs_times.len()));
        s
    }
}

impl ForwardModel for GaussianModel {
    fn output_dim(&self) -> usize {
        self.wells.len() * (1 + self.case.obs_times.len())
    }

    fn evaluate(&self, params: &[f64]) -> ensmooth_core::Result<Vec<f64>> {
        let c = &self.case;
        let n_kl = self.basis.n_kl();
        if params.len() != self.n_params() {
            return Err(ensmooth_core::Error::DimensionMismatch {
                what: "parameter vector",
                expected: self.n_params(),
                found: params.len(),
            });
        }
        let g = *self.basis.grid();
        let log_k = self.basis.realize_values(&params[..n_kl])?;
        let k = ScalarField::new(g, log_k.iter().map(|v| v.exp()).collect())?;
        let mut flow = FlowProblem::steady(k.clone(), c.left_head, c.right_head);
        flow.solver = self.solver;
        let head = solve_steady_flow(&flow)?.last().clone();
        let (vx, vy) = darcy_velocity(&head, &k, c.porosity)?;
        let transport = TransportProblem {
            grid: g,
            porosity: c.porosity,
            alpha_l: c.alpha_l,
            alpha_t: c.alpha_t,
            vx,
            vy,
            source: MassSource {
                x: params[n_kl],
                y: params[n_kl + 1],
                rates: params[n_kl + 2..].to_vec(),
                start: c.source_start,
                interval: c.source_interval,
            },
            initial: ScalarField::constant(g, 0.0),
            output_times: c.obs_times.clone(),
            dt: c.transport_dt,
            open_x_boundaries: true,
        };
        let conc = solve_transport(&transport)?;
        let mut out: Vec<f64> = self.wells.iter().map(|&n| head.values()[n]).collect();
        for field in &conc {
            out.extend(self.wells.iter().map(|&n| field.values()[n]));
        }
        Ok(out)
    }
}

/// Parameters are the node conductivities.
pub struct ChannelModel {
    case: ChannelCase,
    grid: Grid2D,
    wells: Vec<Well>,
    obs_nodes: Vec<usize>,
    solver: SolverOptions,
}

impl ChannelModel {
    pub fn new(case: &ChannelCase, solver: SolverOptions) -> Result<Self> {
        let grid = Grid2D::new(case.nx, case.ny, case.lx, case.ly)?;
        let wells = case
            .wells
            .iter()
            .map(|w| Well {
                node: grid.index(w.i, w.j),
                rate: w.rate,
            })
            .collect();
        let mut obs_nodes = Vec::new();
        for &j in &case.obs_nodes {
            for &i in &case.obs_nodes {
                obs_nodes.push(grid.index(i, j));
            }
        }
        Ok(Self {
            case: case.clone(),
            grid,
            wells,
            obs_nodes,
            solver,
        })
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    fn obs_times(&self) -> Vec<f64> {
        (1..=self.case.n_obs_times)
            .map(|k| k as f64 * self.case.obs_interval)
            .collect()
    }

    /// Observation labels grouped by time.
    pub fn labels(&self) -> Vec<ObsLabel> {
        let mut out = Vec::new();
        for t in self.obs_times() {
            for &n in &self.obs_nodes {
                let (x, y) = self.grid.position(n);
                out.push(ObsLabel {
                    kind: ObsKind::Head,
                    x,
                    y,
                    t: Some(t),
                });
            }
        }
        out
    }
}

impl ForwardModel for ChannelModel {
    fn output_dim(&self) -> usize {
        self.obs_nodes.len() * self.case.n_obs_times
    }

    fn evaluate(&self, params: &[f64]) -> ensmooth_core::Result<Vec<f64>> {
        let c = &self.case;
        // The unit-thickness solver sees transmissivity and storativity.
        let b = c.thickness;
        let k = ScalarField::new(self.grid, params.iter().map(|v| v * b).collect())?;
        let flow = FlowProblem {
            grid: self.grid,
            conductivity: k,
            left_head: Some(c.left_head),
            right_head: Some(c.right_head),
            wells: self.wells.clone(),
            specific_storage: Some(c.specific_storage * b),
            initial_head: Some(ScalarField::constant(self.grid, c.initial_head)),
            solver: self.solver,
        };
        let t_end = c.n_obs_times as f64 * c.obs_interval;
        let HeadSolution::Transient { times, heads } = solve_transient_flow(&flow, t_end, c.flow_dt)? else {
            unreachable!("transient solver returns a transient solution");
        };
        let mut out = Vec::with_capacity(self.output_dim());
        for t in self.obs_times() {
            let idx = (t / c.flow_dt).round() as usize;
            debug_assert!((times[idx] - t).abs() < 1e-9 * t_end.max(1.0));
            out.extend(self.obs_nodes.iter().map(|&n| heads[idx].values()[n]));
        }
        Ok(out)
    }
}

/// Noise stream for the synthetic observations; stream 0 of the same seed drives the update perturbations.
const OBS_NOISE_STREAM: u64 = 1;

fn observe(
    model: &dyn ForwardModel,
    truth: &[f64],
    noise_std: Vec<f64>,
    labels: Vec<ObsLabel>,
    seed: u64,
) -> Result<ObservationSet> {
    let clean = model.evaluate(truth).context("reference forward run failed")?;
    let mut rng = RngStream::new(seed, OBS_NOISE_STREAM);
    let values = clean.iter().zip(&noise_std).map(|(v, s)| v + s * rng.normal()).collect();
    Ok(ObservationSet::new(values, noise_std, labels)?)
}

pub fn build_case(cfg: &ExperimentConfig) -> Result<Case> {
    match &cfg.case {
        CaseConfig::Gaussian(_) => build_case1(cfg),
        CaseConfig::Channel(_) => build_case2(cfg),
    }
}

pub fn gaussian_basis(c: &GaussianCase) -> Result<KlBasis> {
    let grid = Grid2D::new(c.nx, c.ny, c.lx, c.ly)?;
    Ok(build_kl_basis(&c.covariance, grid, c.n_kl)?)
}

pub fn build_case1(cfg: &ExperimentConfig) -> Result<Case> {
    let CaseConfig::Gaussian(c) = &cfg.case else {
        bail!("preset {} is not a Gaussian case", cfg.preset.name());
    };
    let basis = gaussian_basis(c)?;
    log::info!(
        "KL basis: {} modes capture {:.4} of the variance",
        c.n_kl,
        basis.captured_fraction()
    );
    let model = GaussianModel::new(c, basis.clone(), cfg.solver)?;
    let n_kl = c.n_kl;
    let np = model.n_params();

    let mut truth_rng = RngStream::new(cfg.seeds.truth, 0);
    let mut params: Vec<f64> = (0..n_kl).map(|_| truth_rng.normal()).collect();
    let source: Vec<f64> = [c.source_truth.x, c.source_truth.y]
        .into_iter()
        .chain(c.source_truth.rates.iter().copied())
        .collect();
    params.extend_from_slice(&source);
    let reference = ScalarField::new(*model.basis().grid(), model.basis().realize_values(&params[..n_kl])?)?;
    let observations = observe(&model, &params, model.noise_std(), model.labels(), cfg.seeds.noise)?;

    let prior_root = RngStream::new(cfg.seeds.prior, 0);
    let mut prior = DMatrix::zeros(np, cfg.n_members);
    for i in 0..cfg.n_members {
        let mut rng = prior_root.child(i as u64);
        let mut col = prior.column_mut(i);
        for k in 0..n_kl {
            col[k] = rng.normal();
        }
        col[n_kl] = rng.uniform_range(c.source_x_range[0], c.source_x_range[1]);
        col[n_kl + 1] = rng.uniform_range(c.source_y_range[0], c.source_y_range[1]);
        for k in n_kl + 2..np {
            col[k] = rng.uniform_range(c.rate_range[0], c.rate_range[1]);
        }
    }

    let bound = |r: [f64; 2]| Bound {
        lower: Some(r[0]),
        upper: Some(r[1]),
    };
    let mut bounds = vec![Bound::default(); n_kl];
    bounds.push(bound(c.source_x_range));
    bounds.push(bound(c.source_y_range));
    bounds.extend(std::iter::repeat_n(bound(c.rate_range), c.source_truth.rates.len()));

    Ok(Case {
        truth: CaseTruth {
            reference,
            params,
            source: Some(source),
            observations,
        },
        prior: Ensemble::new(prior, 0)?,
        model: Box::new(model),
        constraints: ParamConstraints::new(bounds)?,
        field: FieldMap::Kl(basis),
        source_offset: Some(n_kl),
    })
}

pub fn channel_training_image(c: &ChannelCase) -> Result<TrainingImage> {
    let spacing = c.lx / (c.nx - 1) as f64;
    let ti_grid = Grid2D::new(
        c.ti_nx,
        c.ti_ny,
        spacing * (c.ti_nx - 1) as f64,
        spacing * (c.ti_ny - 1) as f64,
    )?;
    Ok(generate_channel_ti(ti_grid, &c.channels, &mut RngStream::new(c.ti_seed, 0))?)
}

/// Direct-sampling realizations, one per seed stream, in parallel.
pub fn ds_realizations(c: &ChannelCase, ti: &TrainingImage, root: &RngStream, n: usize) -> Result<Vec<ScalarField>> {
    let grid = Grid2D::new(c.nx, c.ny, c.lx, c.ly)?;
    (0..n)
        .into_par_iter()
        .map(|i| Ok(direct_sampling(ti, grid, &[], &c.ds, &mut root.child(i as u64))?))
        .collect()
}

pub fn build_case2(cfg: &ExperimentConfig) -> Result<Case> {
    let CaseConfig::Channel(c) = &cfg.case else {
        bail!("preset {} is not a channel case", cfg.preset.name());
    };
    let model = ChannelModel::new(c, cfg.solver)?;
    let grid = *model.grid();
    let ti = channel_training_image(c)?;
    log::info!("training image channel proportion {:.3}", ti.proportion());

    let reference = ds_realizations(c, &ti, &RngStream::new(cfg.seeds.truth, 0), 1)?.remove(0);
    let params = reference.values().to_vec();
    let ny = model.output_dim();
    let observations = observe(&model, &params, vec![c.noise_std; ny], model.labels(), cfg.seeds.noise)?;

    let members = ds_realizations(c, &ti, &RngStream::new(cfg.seeds.prior, 0), cfg.n_members)?;
    let mut prior = DMatrix::zeros(grid.len(), cfg.n_members);
    for (i, f) in members.iter().enumerate() {
        prior.column_mut(i).copy_from_slice(f.values());
    }
    let constraints = if c.clamp {
        ParamConstraints::uniform(grid.len(), c.channels.palette[0], c.channels.palette[1])?
    } else {
        ParamConstraints::none()
    };
    Ok(Case {
        truth: CaseTruth {
            reference,
            params,
            source: None,
            observations,
        },
        prior: Ensemble::new(prior, 0)?,
        model: Box::new(model),
        constraints,
        field: FieldMap::Direct(grid),
        source_offset: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{resolve, Preset};
    use serde_json::json;

    fn small_gaussian() -> ExperimentConfig {
        resolve(
            Preset::GaussianCase1Desk,
            &json!({"n_members": 6, "case": {"gaussian": {"n_kl": 10}}}),
        )
        .unwrap()
    }

    #[test]
    fn case1_dimensions_and_ranges() {
        let cfg = small_gaussian();
        let case = build_case1(&cfg).unwrap();
        assert_eq!(case.model.output_dim(), 150);
        assert_eq!(case.truth.observations.len(), 150);
        assert_eq!(case.prior.n_params(), 18);
        assert_eq!(case.truth.params.len(), 18);
        assert_eq!(
            case.truth.source.as_deref().unwrap(),
            &[3.52, 4.44, 5.69, 7.88, 6.31, 1.49, 6.87, 5.55]
        );
        let p = case.prior.params();
        for i in 0..p.ncols() {
            assert!((3.0..=5.0).contains(&p[(10, i)]));
            assert!((4.0..=6.0).contains(&p[(11, i)]));
            for k in 12..18 {
                assert!((0.0..=8.0).contains(&p[(k, i)]));
            }
        }
        let labels = case.truth.observations.labels();
        assert!(labels[..15].iter().all(|l| l.kind == ObsKind::Head));
        assert!(labels[15..].iter().all(|l| l.kind == ObsKind::Concentration));
        assert_eq!(labels[15].t, Some(4.0));
        assert_eq!(labels[149].t, Some(12.0));
    }

    #[test]
    fn case1_observations_are_noisy_reference_outputs() {
        let cfg = small_gaussian();
        let case = build_case1(&cfg).unwrap();
        let clean = case.model.evaluate(&case.truth.params).unwrap();
        let obs = case.truth.observations.values();
        let max = clean.iter().zip(obs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max > 0.0 && max < 6.0 * 0.005, "max deviation {max}");
        // Heads between the boundary values, plume reached some wells.
        assert!(clean[..15].iter().all(|h| (11.0..=12.0).contains(h)));
        assert!(clean[15..].iter().any(|c| *c > 1e-3));
        assert!(clean[15..].iter().all(|c| *c >= 0.0));
    }

    #[test]
    fn same_truth_and_noise_seeds_give_same_observations() {
        let a = build_case1(&small_gaussian()).unwrap();
        let mut cfg = small_gaussian();
        cfg.seeds.prior += 17;
        cfg.seeds.training += 3;
        let b = build_case1(&cfg).unwrap();
        assert_eq!(a.truth.observations, b.truth.observations);
        assert_ne!(a.prior.params(), b.prior.params());
    }

    #[test]
    fn channel_model_output_layout() {
        let cfg = resolve(Preset::ChannelCase2Desk, &json!({})).unwrap();
        let CaseConfig::Channel(c) = &cfg.case else { panic!() };
        let model = ChannelModel::new(c, cfg.solver).unwrap();
        assert_eq!(model.output_dim(), 490);
        let labels = model.labels();
        assert_eq!(labels.len(), 490);
        assert_eq!(labels[0].t, Some(0.6));
        assert!((labels[489].t.unwrap() - 6.0).abs() < 1e-12);
        let k = vec![1.0; 41 * 41];
        let y = model.evaluate(&k).unwrap();
        assert!(y.iter().all(|h| h.is_finite()));
        // The injection well raises nearby heads above the background gradient.
        assert!(y.iter().any(|h| *h > 198.0));
    }
}
