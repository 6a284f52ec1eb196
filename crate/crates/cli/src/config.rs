//! Experiment configuration: presets, JSON overrides and validation.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ensmooth_core::linalg::SolverOptions;
use ensmooth_core::neural::{NetworkSpec, OutputActivation, TrainConfig};
use ensmooth_core::param::{ChannelSpec, CovarianceSpec, DsParams};
use ensmooth_core::smoother::Method;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Preset {
    GaussianCase1,
    GaussianCase1Desk,
    ChannelCase2,
    ChannelCase2Desk,
    /// Nothing is filled in; the config file must be complete.
    Custom,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::GaussianCase1 => "gaussian_case1",
            Preset::GaussianCase1Desk => "gaussian_case1_desk",
            Preset::ChannelCase2 => "channel_case2",
            Preset::ChannelCase2Desk => "channel_case2_desk",
            Preset::Custom => "custom",
        }
    }
}

/// The four independent seeds of one experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedBundle {
    /// Reference field.
    pub truth: u64,
    /// Prior ensemble.
    pub prior: u64,
    /// Observation noise and the per-iteration perturbations.
    pub noise: u64,
    /// Network initialisation and batch order.
    pub training: u64,
}

impl SeedBundle {
    pub fn from_index(n: u64) -> Self {
        let base = n.wrapping_mul(1000);
        Self {
            truth: base + 1,
            prior: base + 2,
            noise: base + 3,
            training: base + 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub widths: Vec<usize>,
    pub batchnorm: bool,
    pub output_activation: OutputActivation,
}

impl NetworkConfig {
    pub fn spec(&self, input_dim: usize, output_dim: usize) -> NetworkSpec {
        NetworkSpec {
            input_dim,
            output_dim,
            widths: self.widths.clone(),
            batchnorm: self.batchnorm,
            output_activation: self.output_activation,
        }
    }
}

/// Point source with piecewise-constant release rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceParams {
    pub x: f64,
    pub y: f64,
    pub rates: Vec<f64>,
}

/// Steady flow plus transient transport on a Gaussian log-conductivity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianCase {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub covariance: CovarianceSpec,
    pub n_kl: usize,
    pub left_head: f64,
    pub right_head: f64,
    pub porosity: f64,
    pub alpha_l: f64,
    pub alpha_t: f64,
    pub source_truth: SourceParams,
    pub source_x_range: [f64; 2],
    pub source_y_range: [f64; 2],
    pub rate_range: [f64; 2],
    /// Start of the first release interval.
    pub source_start: f64,
    pub source_interval: f64,
    /// Monitoring wells sit on the product of these coordinates.
    pub wells_x: Vec<f64>,
    pub wells_y: Vec<f64>,
    pub obs_times: Vec<f64>,
    pub head_noise_std: f64,
    pub conc_noise_std: f64,
    pub transport_dt: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSpec {
    pub i: usize,
    pub j: usize,
    pub rate: f64,
}

/// Transient flow through a two-facies channelized conductivity field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelCase {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
    pub left_head: f64,
    pub right_head: f64,
    pub initial_head: f64,
    pub specific_storage: f64,
    /// Confined aquifer thickness; transmissivity is `K * thickness`.
    pub thickness: f64,
    pub wells: Vec<WellSpec>,
    /// Observation wells sit on the product of these node indices.
    pub obs_nodes: Vec<usize>,
    pub obs_interval: f64,
    pub n_obs_times: usize,
    pub flow_dt: f64,
    pub noise_std: f64,
    /// Training-image size in nodes; its spacing equals the simulation grid's.
    pub ti_nx: usize,
    pub ti_ny: usize,
    pub ti_seed: u64,
    pub channels: ChannelSpec,
    pub ds: DsParams,
    /// Clamp updated conductivities into the palette range.
    pub clamp: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CaseConfig {
    Gaussian(GaussianCase),
    Channel(ChannelCase),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub method: Method,
    pub n_members: usize,
    pub n_iter: usize,
    pub seeds: SeedBundle,
    pub solver: SolverOptions,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub case: CaseConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn gaussian_case(nx: usize, ny: usize, n_kl: usize) -> GaussianCase {
    GaussianCase {
        nx,
        ny,
        lx: 20.0,
        ly: 10.0,
        covariance: CovarianceSpec {
            variance: 1.0,
            lambda_x: 10.0,
            lambda_y: 5.0,
            mean: 2.0,
        },
        n_kl,
        left_head: 12.0,
        right_head: 11.0,
        porosity: 0.25,
        alpha_l: 0.3,
        alpha_t: 0.03,
        source_truth: SourceParams {
            x: 3.52,
            y: 4.44,
            rates: vec![5.69, 7.88, 6.31, 1.49, 6.87, 5.55],
        },
        source_x_range: [3.0, 5.0],
        source_y_range: [4.0, 6.0],
        rate_range: [0.0, 8.0],
        source_start: 1.0,
        source_interval: 1.0,
        wells_x: vec![4.0, 7.0, 10.0, 13.0, 16.0],
        wells_y: vec![2.5, 5.0, 7.5],
        obs_times: (4..=12).map(f64::from).collect(),
        head_noise_std: 0.005,
        conc_noise_std: 0.005,
        transport_dt: 0.05,
    }
}

fn channel_case() -> ChannelCase {
    ChannelCase {
        nx: 41,
        ny: 41,
        lx: 800.0,
        ly: 800.0,
        left_head: 202.0,
        right_head: 198.0,
        initial_head: 198.0,
        specific_storage: 1e-4,
        thickness: 50.0,
        wells: vec![
            WellSpec { i: 12, j: 24, rate: 150.0 },
            WellSpec { i: 28, j: 16, rate: -150.0 },
        ],
        obs_nodes: (1..=7).map(|k| 5 * k).collect(),
        obs_interval: 0.6,
        n_obs_times: 10,
        flow_dt: 0.1,
        noise_std: 0.01,
        ti_nx: 250,
        ti_ny: 250,
        ti_seed: 20_200,
        channels: ChannelSpec::channelized(20.0),
        ds: DsParams::default(),
        clamp: true,
    }
}

/// Fully populated configuration for a named preset. `Custom` has none.
pub fn preset_config(preset: Preset) -> Option<ExperimentConfig> {
    let case1_train = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 256,
        max_epochs: 60,
        patience: 8,
        ..TrainConfig::default()
    };
    let case2_train = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 256,
        max_epochs: 80,
        patience: 8,
        ..TrainConfig::default()
    };
    let case1_net = NetworkConfig {
        widths: vec![150, 140, 130, 120, 108],
        batchnorm: true,
        output_activation: OutputActivation::Linear,
    };
    let case2_net = NetworkConfig {
        widths: vec![512, 512, 512],
        batchnorm: true,
        output_activation: OutputActivation::Linear,
    };
    let base = |preset, n_members, n_iter, network, train, case| ExperimentConfig {
        preset,
        method: Method::Kalman,
        n_members,
        n_iter,
        seeds: SeedBundle::from_index(1),
        solver: SolverOptions::default(),
        network,
        train,
        case,
        output_dir: None,
    };
    Some(match preset {
        Preset::GaussianCase1 => base(
            preset,
            500,
            5,
            case1_net,
            case1_train,
            CaseConfig::Gaussian(gaussian_case(81, 41, 100)),
        ),
        Preset::GaussianCase1Desk => base(
            preset,
            200,
            4,
            case1_net,
            TrainConfig {
                max_epochs: 30,
                patience: 5,
                ..case1_train
            },
            CaseConfig::Gaussian(gaussian_case(41, 21, 50)),
        ),
        Preset::ChannelCase2 => base(
            preset,
            499,
            1,
            case2_net,
            case2_train,
            CaseConfig::Channel(channel_case()),
        ),
        Preset::ChannelCase2Desk => base(
            preset,
            150,
            1,
            case2_net,
            case2_train,
            CaseConfig::Channel(channel_case()),
        ),
        Preset::Custom => return None,
    })
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

/// Preset defaults with `overrides` applied on top, validated.
pub fn resolve(preset: Preset, overrides: &Value) -> Result<ExperimentConfig> {
    ensure!(overrides.is_object(), "config overrides must be a JSON object");
    if let Some(p) = overrides.get("preset") {
        let named: Preset = serde_json::from_value(p.clone()).context("unknown preset in config")?;
        if named != preset {
            bail!(
                "config names preset {} but {} was requested",
                named.name(),
                preset.name()
            );
        }
    }
    let mut value = match preset_config(preset) {
        Some(cfg) => serde_json::to_value(cfg)?,
        None => serde_json::json!({ "preset": "custom" }),
    };
    let kind_of = |v: &Value| v.get("case").and_then(Value::as_object).and_then(|o| o.keys().next().cloned());
    if let (Some(a), Some(b)) = (kind_of(&value), kind_of(overrides)) {
        if a != b {
            bail!("preset {} is a {a} case; overrides describe a {b} case", preset.name());
        }
    }
    merge(&mut value, overrides);
    let cfg: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config")?;
    cfg.validate()?;
    Ok(cfg)
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    ensure!(r[0].is_finite() && r[1] >= r[0], "{name} must be a finite [lo, hi] with lo <= hi");
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.n_members >= 2, "n_members must be at least 2");
        ensure!(self.n_iter >= 1, "n_iter must be at least 1");
        self.train.validate()?;
        ensure!(!self.network.widths.is_empty(), "network needs at least one block");
        match &self.case {
            CaseConfig::Gaussian(c) => {
                ensure!(c.nx >= 3 && c.ny >= 3, "grid must be at least 3 x 3");
                ensure!(c.lx > 0.0 && c.ly > 0.0, "domain extent must be positive");
                c.covariance.validate()?;
                ensure!(
                    c.n_kl >= 1 && c.n_kl <= c.nx * c.ny,
                    "n_kl = {} must lie in 1..={}",
                    c.n_kl,
                    c.nx * c.ny
                );
                check_range("source_x_range", c.source_x_range)?;
                check_range("source_y_range", c.source_y_range)?;
                check_range("rate_range", c.rate_range)?;
                ensure!(
                    c.source_x_range[0] >= 0.0 && c.source_x_range[1] <= c.lx,
                    "source_x_range leaves the domain"
                );
                ensure!(
                    c.source_y_range[0] >= 0.0 && c.source_y_range[1] <= c.ly,
                    "source_y_range leaves the domain"
                );
                ensure!(c.rate_range[0] >= 0.0, "release rates must be nonnegative");
                ensure!(!c.source_truth.rates.is_empty(), "source needs at least one release interval");
                ensure!(
                    c.wells_x.iter().all(|x| (0.0..=c.lx).contains(x))
                        && c.wells_y.iter().all(|y| (0.0..=c.ly).contains(y)),
                    "monitoring wells must lie inside the domain"
                );
                ensure!(!c.wells_x.is_empty() && !c.wells_y.is_empty(), "no monitoring wells");
                ensure!(
                    c.obs_times.windows(2).all(|w| w[1] > w[0]) && c.obs_times.first().is_some_and(|t| *t > 0.0),
                    "obs_times must be positive and strictly increasing"
                );
                ensure!(
                    c.head_noise_std > 0.0 && c.conc_noise_std > 0.0,
                    "noise standard deviations must be positive"
                );
                ensure!(c.transport_dt > 0.0, "transport_dt must be positive");
                ensure!(c.source_interval > 0.0, "source_interval must be positive");
            }
            CaseConfig::Channel(c) => {
                ensure!(c.nx >= 3 && c.ny >= 3, "grid must be at least 3 x 3");
                ensure!(c.lx > 0.0 && c.ly > 0.0, "domain extent must be positive");
                ensure!(
                    c.wells.iter().all(|w| w.i > 0 && w.i + 1 < c.nx && w.j < c.ny),
                    "pumping wells must sit on interior columns"
                );
                ensure!(
                    !c.obs_nodes.is_empty() && c.obs_nodes.iter().all(|&k| k < c.nx && k < c.ny),
                    "observation nodes must lie on the grid"
                );
                ensure!(c.obs_interval > 0.0 && c.n_obs_times >= 1, "empty observation schedule");
                ensure!(c.flow_dt > 0.0, "flow_dt must be positive");
                let ratio = c.obs_interval / c.flow_dt;
                ensure!(
                    (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0,
                    "obs_interval must be a multiple of flow_dt"
                );
                ensure!(c.specific_storage > 0.0, "specific_storage must be positive");
                ensure!(c.thickness > 0.0, "thickness must be positive");
                ensure!(c.noise_std > 0.0, "noise_std must be positive");
                ensure!(
                    c.ti_nx >= c.nx && c.ti_ny >= c.ny,
                    "training image must be at least as large as the grid"
                );
                ensure!(c.channels.palette[0] < c.channels.palette[1], "palette must be increasing");
            }
        }
        Ok(())
    }

    /// Echo of the config with the method and seeds as they were actually used.
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
