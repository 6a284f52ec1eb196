//! The iterate / re-run / update assimilation loop.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{invalid, Error, Result};
use crate::io::save_ensemble;
use crate::neural::{fit, save_network, Network, NetworkSpec, Scaler, TrainConfig, TrainHistory};
use crate::obs::ObservationSet;
use crate::rng::RngStream;
use crate::smoother::constraints::ParamConstraints;
use crate::smoother::dl::es_dl_update;
use crate::smoother::kalman::es_kalman_update;
use crate::smoother::mda::mda_schedule;
use crate::smoother::pairs::generate_training_pairs;

/// A deterministic simulator `m -> f(m)`.
pub trait ForwardModel: Sync {
    fn output_dim(&self) -> usize;
    fn evaluate(&self, params: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kalman,
    Dl,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Kalman => "kalman",
            Method::Dl => "dl",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AssimilationConfig {
    pub n_iter: usize,
    pub method: Method,
    pub constraints: ParamConstraints,
    /// Required for [`Method::Dl`].
    pub network: Option<NetworkSpec>,
    pub train: TrainConfig,
    pub noise_seed: u64,
    pub training_seed: u64,
    /// Where to write `ens_t{t}` snapshots, networks and the run log.
    pub snapshot_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainedMapping {
    pub iteration: usize,
    pub network: Network,
    pub scaler: Scaler,
    pub history: TrainHistory,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// Inflation used to produce this ensemble; `None` for the prior.
    pub alpha: Option<f64>,
    /// Mean over members of the RMSE between simulated and observed data.
    pub mean_rmse: f64,
    /// Mean over members of the noise-weighted RMS misfit.
    pub mean_weighted: f64,
}

#[derive(Clone, Debug)]
pub struct AssimilationHistory {
    /// Prior followed by the ensemble after each iteration, all with outputs.
    pub ensembles: Vec<Ensemble>,
    pub networks: Vec<TrainedMapping>,
    pub log: Vec<IterationLog>,
}

impl AssimilationHistory {
    pub fn posterior(&self) -> &Ensemble {
        self.ensembles.last().expect("history holds at least the prior")
    }
}

/// Evaluates every member, in parallel on the current rayon pool.
/// The first failing member (lowest index) aborts with its diagnostics.
pub fn evaluate_ensemble(e: &mut Ensemble, model: &dyn ForwardModel) -> Result<()> {
    let ne = e.n_members();
    let iteration = e.iteration();
    let ny = model.output_dim();
    let cols: Vec<Vec<f64>> = (0..ne).map(|i| e.member(i)).collect();
    let results: Vec<Result<Vec<f64>>> = cols.par_iter().map(|m| model.evaluate(m)).collect();
    let mut out = DMatrix::zeros(ny, ne);
    for (i, r) in results.into_iter().enumerate() {
        let failure = |reason: String| Error::ForwardFailure {
            member: i,
            iteration,
            reason,
        };
        let y = r.map_err(|err| failure(err.to_string()))?;
        if y.len() != ny {
            return Err(failure(format!("returned {} outputs, expected {ny}", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(failure("returned non-finite outputs".into()));
        }
        out.set_column(i, &nalgebra::DVector::from_vec(y));
    }
    e.set_outputs(out)
}

fn misfit(e: &Ensemble, obs: &ObservationSet, alpha: Option<f64>) -> Result<IterationLog> {
    let y = e.require_outputs()?;
    let ne = e.n_members() as f64;
    let ny = obs.len() as f64;
    let (mut plain, mut weighted) = (0.0, 0.0);
    for col in y.column_iter() {
        let (mut s, mut w) = (0.0, 0.0);
        for (k, v) in col.iter().enumerate() {
            let r = v - obs.values()[k];
            s += r * r;
            w += (r / obs.noise_std()[k]).powi(2);
        }
        plain += (s / ny).sqrt();
        weighted += (w / ny).sqrt();
    }
    Ok(IterationLog {
        iteration: e.iteration(),
        alpha,
        mean_rmse: plain / ne,
        mean_weighted: weighted / ne,
    })
}

fn write_log(path: &std::path::Path, log: &[IterationLog]) -> Result<()> {
    let mut s = String::from("iteration,alpha,mean_rmse,mean_weighted_misfit\n");
    for r in log {
        let alpha = r.alpha.map(|a| format!("{a:.17e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{:.17e},{:.17e}", r.iteration, alpha, r.mean_rmse, r.mean_weighted);
    }
    fs::write(path, s)?;
    Ok(())
}

/// Seed for the network trained at iteration `t`.
fn training_seed(base: u64, t: usize) -> u64 {
    base.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs `n_iter` smoother iterations from `prior`.
///
/// Outputs are recomputed after every update, so each update and each pair
/// set sees outputs consistent with the current parameters. For the learned
/// update a fresh network is trained every iteration.
pub fn run_assimilation(
    cfg: &AssimilationConfig,
    prior: Ensemble,
    obs: &ObservationSet,
    model: &dyn ForwardModel,
) -> Result<AssimilationHistory> {
    let schedule = mda_schedule(cfg.n_iter)?;
    if model.output_dim() != obs.len() {
        return Err(invalid(format!(
            "forward model produces {} outputs for {} observations",
            model.output_dim(),
            obs.len()
        )));
    }
    let spec = match (cfg.method, &cfg.network) {
        (Method::Dl, None) => return Err(invalid("the learned update needs a network spec")),
        (_, s) => s.clone(),
    };
    if let Some(dir) = &cfg.snapshot_dir {
        fs::create_dir_all(dir)?;
    }
    let snapshot = |e: &Ensemble| -> Result<()> {
        if let Some(dir) = &cfg.snapshot_dir {
            save_ensemble(e, &dir.join(format!("ens_t{}.manifest", e.iteration())))?;
        }
        Ok(())
    };

    let mut current = prior;
    if current.outputs().is_none() {
        evaluate_ensemble(&mut current, model)?;
    }
    snapshot(&current)?;
    let mut history = AssimilationHistory {
        log: vec![misfit(&current, obs, None)?],
        ensembles: vec![current.clone()],
        networks: Vec::new(),
    };
    let noise_root = RngStream::new(cfg.noise_seed, 0);
    for (k, &alpha) in schedule.alphas().iter().enumerate() {
        let t = k + 1;
        let iter_rng = noise_root.child(t as u64);
        let mut member_rng = iter_rng.child(0);
        let params = match cfg.method {
            Method::Kalman => es_kalman_update(&current, obs, alpha, &cfg.constraints, &mut member_rng)?,
            Method::Dl => {
                let spec = spec.as_ref().expect("checked above");
                let pairs = generate_training_pairs(&current, obs, alpha, &mut iter_rng.child(1))?;
                let train = TrainConfig {
                    seed: training_seed(cfg.training_seed, t),
                    ..cfg.train
                };
                let fitted = fit(spec, &pairs, &train)?;
                drop(pairs);
                let h = &fitted.history;
                log::info!(
                    "iteration {t}: trained on pairs, best epoch {} of {} (train loss {:.4e}, validation loss {})",
                    h.best_epoch + 1,
                    h.train_loss.len(),
                    h.train_loss[h.best_epoch],
                    h.val_loss[h.best_epoch].map_or("-".to_string(), |v| format!("{v:.4e}"))
                );
                let m = es_dl_update(
                    &current,
                    &fitted.network,
                    &fitted.scaler,
                    obs,
                    alpha,
                    &cfg.constraints,
                    &mut member_rng,
                )?;
                if let Some(dir) = &cfg.snapshot_dir {
                    save_network(&fitted.network, &fitted.scaler, &dir.join(format!("net_t{t}.manifest")))?;
                }
                history.networks.push(TrainedMapping {
                    iteration: t,
                    network: fitted.network,
                    scaler: fitted.scaler,
                    history: fitted.history,
                });
                m
            }
        };
        let mut next = current.updated(params)?;
        evaluate_ensemble(&mut next, model)?;
        snapshot(&next)?;
        let entry = misfit(&next, obs, Some(alpha))?;
        log::info!("iteration {t}: mean data RMSE {:.4e}", entry.mean_rmse);
        history.log.push(entry);
        history.ensembles.push(next.clone());
        current = next;
    }
    if let Some(dir) = &cfg.snapshot_dir {
        write_log(&dir.join("run_log.csv"), &history.log)?;
    }
    Ok(history)
}
