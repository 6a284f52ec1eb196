//! Minibatch training, inference on innovations, and persistence.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::io::{read_blob, write_blob, LayerShape, Manifest};
use crate::neural::adam::{AdamConfig, AdamState};
use crate::neural::network::{mse_loss, Network, NetworkSpec};
use crate::neural::scaler::Scaler;
use crate::rng::RngStream;
use crate::smoother::pairs::TrainingPairs;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validation_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 256,
            max_epochs: 100,
            validation_fraction: 0.1,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(invalid("batch size and epoch count must be positive"));
        }
        if !(0.0..=0.5).contains(&self.validation_fraction) {
            return Err(invalid("validation fraction must lie in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// `None` when no validation split is held out.
    pub val_loss: Vec<Option<f64>>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub network: Network,
    pub scaler: Scaler,
    pub history: TrainHistory,
}

fn gather(src: &[f64], dim: usize, cols: &[usize], dst: &mut Vec<f64>) {
    dst.clear();
    for &c in cols {
        dst.extend_from_slice(&src[c * dim..(c + 1) * dim]);
    }
}

/// Inference in fixed-size chunks so memory stays bounded on large sets.
fn forward_chunked(net: &Network, x: &[f64], in_dim: usize) -> Result<Vec<f64>> {
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(x.len() / in_dim * net.spec().output_dim);
    for chunk in x.chunks(CHUNK * in_dim) {
        out.extend(net.forward(chunk)?);
    }
    Ok(out)
}

/// Trains a fresh network on standardized pairs with minibatch Adam,
/// keeping the parameters of the epoch with the lowest validation loss.
pub fn fit(spec: &NetworkSpec, pairs: &TrainingPairs, cfg: &TrainConfig) -> Result<FitResult> {
    cfg.validate()?;
    spec.validate()?;
    let (din, dout) = (pairs.inputs().nrows(), pairs.outputs().nrows());
    if spec.input_dim != din || spec.output_dim != dout {
        return Err(Error::DimensionMismatch {
            what: "network spec vs training pairs",
            expected: spec.input_dim * spec.output_dim,
            found: din * dout,
        });
    }
    let n = pairs.len();
    if n == 0 {
        return Err(invalid("no training pairs"));
    }
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_val = (cfg.validation_fraction * n as f64).floor() as usize;
    let (val_cols, train_cols) = order.split_at(n_val);
    let min_batch = if spec.batchnorm { 2 } else { 1 };
    if train_cols.len() < min_batch {
        return Err(invalid("too few training pairs after the validation split"));
    }

    let (scaler, warnings) = Scaler::fit(
        pairs.inputs().as_slice(),
        din,
        pairs.outputs().as_slice(),
        dout,
        train_cols,
    )?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let mut x_all = pairs.inputs().as_slice().to_vec();
    let mut y_all = pairs.outputs().as_slice().to_vec();
    scaler.standardize_inputs(&mut x_all);
    scaler.standardize_outputs(&mut y_all);
    let (mut x_val, mut y_val) = (Vec::new(), Vec::new());
    gather(&x_all, din, val_cols, &mut x_val);
    gather(&y_all, dout, val_cols, &mut y_val);

    let mut net = Network::new(spec.clone(), &mut rng.child(1))?;
    let adam = cfg.adam();
    let mut state = AdamState::new(net.n_params());
    let mut history = TrainHistory {
        warnings,
        ..TrainHistory::default()
    };
    let mut best: Option<(f64, Network)> = None;
    let mut since_best = 0;
    let mut train_order = train_cols.to_vec();
    let (mut xb, mut yb) = (Vec::new(), Vec::new());
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut train_order);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in train_order.chunks(cfg.batch_size) {
            if batch.len() < min_batch {
                continue;
            }
            gather(&x_all, din, batch, &mut xb);
            gather(&y_all, dout, batch, &mut yb);
            let tape = net.forward_train(&xb)?;
            let (loss, dy) = mse_loss(tape.output(), &yb);
            let grads = net.backward(&tape, &dy);
            net.update_running_stats(&tape);
            state.update(net.params_mut(), &grads, &adam)?;
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!("training diverged at epoch {epoch}")));
        }
        history.train_loss.push(train_loss);
        if n_val == 0 {
            history.val_loss.push(None);
            history.best_epoch = epoch;
            continue;
        }
        let pred = forward_chunked(&net, &x_val, din)?;
        let val = mse_loss(&pred, &y_val).0;
        history.val_loss.push(Some(val));
        log::debug!("epoch {epoch}: train {train_loss:.4e} val {val:.4e}");
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let network = best.map_or(net, |(_, b)| b);
    Ok(FitResult {
        network,
        scaler,
        history,
    })
}

/// Standardize, run the network in inference mode, and map back to parameter units.
/// `innovations` is `N_y x n`; the result is `N_m x n`.
pub fn predict_updates(net: &Network, scaler: &Scaler, innovations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let spec = net.spec();
    if innovations.nrows() != spec.input_dim || scaler.in_dim() != spec.input_dim || scaler.out_dim() != spec.output_dim {
        return Err(Error::DimensionMismatch {
            what: "innovation length",
            expected: spec.input_dim,
            found: innovations.nrows(),
        });
    }
    let mut x = innovations.as_slice().to_vec();
    scaler.standardize_inputs(&mut x);
    let mut y = forward_chunked(net, &x, spec.input_dim)?;
    scaler.unstandardize_outputs(&mut y);
    Ok(DMatrix::from_vec(spec.output_dim, innovations.ncols(), y))
}

pub fn predict_update(net: &Network, scaler: &Scaler, innovation: &[f64]) -> Result<Vec<f64>> {
    let m = DMatrix::from_column_slice(innovation.len(), 1, innovation);
    Ok(predict_updates(net, scaler, &m)?.as_slice().to_vec())
}

/// Writes parameters, running statistics and the scaler; the manifest carries
/// the network spec and a table of parameter tensor shapes.
pub fn save_network(net: &Network, scaler: &Scaler, manifest_path: &Path) -> Result<()> {
    let mut m = Manifest::new("network");
    m.dims.insert("n_params".into(), net.n_params());
    m.dims.insert("n_stats".into(), net.running_mean().len());
    m.dims.insert("input_dim".into(), net.spec().input_dim);
    m.dims.insert("output_dim".into(), net.spec().output_dim);
    m.layers = net
        .tensors()
        .iter()
        .map(|t| LayerShape {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    m.meta = Some(serde_json::to_value(net.spec()).map_err(|e| Error::Numeric(e.to_string()))?);
    let mut values = net.params().to_vec();
    values.extend_from_slice(net.running_mean());
    values.extend_from_slice(net.running_var());
    for part in [&scaler.in_mean, &scaler.in_std, &scaler.out_mean, &scaler.out_std] {
        values.extend_from_slice(part);
    }
    write_blob(manifest_path, m, &values)
}

pub fn load_network(manifest_path: &Path) -> Result<(Network, Scaler)> {
    let malformed = |reason: String| Error::MalformedManifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let (m, values) = read_blob(manifest_path, "network", |m| {
        let np = m.dim("n_params", manifest_path)?;
        let ns = m.dim("n_stats", manifest_path)?;
        let din = m.dim("input_dim", manifest_path)?;
        let dout = m.dim("output_dim", manifest_path)?;
        Ok(np + 2 * ns + 2 * din + 2 * dout)
    })?;
    let spec: NetworkSpec = m
        .meta
        .as_ref()
        .ok_or_else(|| malformed("missing network spec".into()))
        .and_then(|v| serde_json::from_value(v.clone()).map_err(|e| malformed(e.to_string())))?;
    let mut net = Network::new(spec, &mut RngStream::new(0, 0)).map_err(|e| malformed(e.to_string()))?;
    let table: Vec<LayerShape> = net
        .tensors()
        .iter()
        .map(|t| LayerShape {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    if table != m.layers || m.dims["n_params"] != net.n_params() || m.dims["n_stats"] != net.running_mean().len() {
        return Err(malformed("layer table does not match the network spec".into()));
    }
    let (np, ns) = (net.n_params(), net.running_mean().len());
    let (din, dout) = (net.spec().input_dim, net.spec().output_dim);
    let mut rest = values.as_slice();
    let mut take = |k: usize| {
        let (head, tail) = rest.split_at(k);
        rest = tail;
        head.to_vec()
    };
    let params = take(np);
    let mean = take(ns);
    let var = take(ns);
    let scaler = Scaler {
        in_mean: take(din),
        in_std: take(din),
        out_mean: take(dout),
        out_std: take(dout),
    };
    net.set_state(params, mean, var)?;
    Ok((net, scaler))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::network::OutputActivation;

    fn identity_pairs(n: usize, dim: usize, seed: u64) -> TrainingPairs {
        let mut rng = RngStream::new(seed, 0);
        let x = DMatrix::from_fn(dim, n, |_, _| rng.normal());
        TrainingPairs::new(x.clone(), x).unwrap()
    }

    fn spec(din: usize, dout: usize, widths: Vec<usize>) -> NetworkSpec {
        NetworkSpec {
            input_dim: din,
            output_dim: dout,
            widths,
            batchnorm: true,
            output_activation: OutputActivation::Linear,
        }
    }

    #[test]
    fn learns_identity_map() {
        let pairs = identity_pairs(4000, 8, 1);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 128,
            max_epochs: 200,
            patience: 40,
            ..TrainConfig::default()
        };
        let r = fit(&NetworkSpec { batchnorm: false, ..spec(8, 8, vec![64, 64]) }, &pairs, &cfg).unwrap();
        let best = r.history.val_loss[r.history.best_epoch].unwrap();
        assert!(best < 1e-3, "validation loss {best}");
    }

    #[test]
    fn no_validation_keeps_last_epoch() {
        let pairs = identity_pairs(100, 3, 2);
        let cfg = TrainConfig {
            validation_fraction: 0.0,
            max_epochs: 7,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let r = fit(&spec(3, 3, vec![4]), &pairs, &cfg).unwrap();
        assert_eq!(r.history.train_loss.len(), 7);
        assert_eq!(r.history.val_loss.len(), 7);
        assert_eq!(r.history.best_epoch, 6);
        assert!(r.history.val_loss.iter().all(|v| v.is_none()));
    }

    #[test]
    fn training_is_reproducible() {
        let pairs = identity_pairs(300, 4, 3);
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 50,
            seed: 9,
            ..TrainConfig::default()
        };
        let a = fit(&spec(4, 4, vec![5, 4]), &pairs, &cfg).unwrap();
        let b = fit(&spec(4, 4, vec![5, 4]), &pairs, &cfg).unwrap();
        assert_eq!(a.network.params(), b.network.params());
        assert_eq!(a.network.running_var(), b.network.running_var());
    }

    #[test]
    fn constant_output_warns() {
        let mut rng = RngStream::new(4, 0);
        let x = DMatrix::from_fn(2, 60, |_, _| rng.normal());
        let y = DMatrix::from_fn(2, 60, |r, c| if r == 0 { 3.0 } else { x[(0, c)] });
        let pairs = TrainingPairs::new(x, y).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let r = fit(&spec(2, 2, vec![3]), &pairs, &cfg).unwrap();
        assert_eq!(r.history.warnings.len(), 1);
    }

    #[test]
    fn zero_network_predicts_output_mean() {
        let pairs = identity_pairs(50, 3, 5);
        let cfg = TrainConfig {
            max_epochs: 1,
            ..TrainConfig::default()
        };
        let mut r = fit(&spec(3, 3, vec![3]), &pairs, &cfg).unwrap();
        r.network.zero_head();
        let u = predict_update(&r.network, &r.scaler, &[0.3, -1.0, 2.0]).unwrap();
        for (a, b) in u.iter().zip(&r.scaler.out_mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(predict_update(&r.network, &r.scaler, &[0.3, -1.0]).is_err());
    }

    #[test]
    fn overfit_reproduces_targets_and_batches_agree() {
        let mut rng = RngStream::new(6, 0);
        let x = DMatrix::from_fn(3, 40, |_, _| rng.normal());
        let y = DMatrix::from_fn(2, 40, |r, c| (x[(r, c)] * 1.5).sin() + x[(2, c)]);
        let pairs = TrainingPairs::new(x.clone(), y.clone()).unwrap();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            validation_fraction: 0.0,
            batch_size: 40,
            max_epochs: 3000,
            ..TrainConfig::default()
        };
        let s = NetworkSpec {
            batchnorm: false,
            ..spec(3, 2, vec![32, 32])
        };
        let r = fit(&s, &pairs, &cfg).unwrap();
        assert!(*r.history.train_loss.last().unwrap() < 1e-6, "{:?}", r.history.train_loss.last());
        let all = predict_updates(&r.network, &r.scaler, &x).unwrap();
        for c in 0..40 {
            let one = predict_update(&r.network, &r.scaler, x.column(c).as_slice()).unwrap();
            assert_eq!(one.as_slice(), all.column(c).as_slice());
            for k in 0..2 {
                let err = (one[k] - y[(k, c)]) / r.scaler.out_std[k];
                assert!(err.abs() < 1e-2);
            }
        }
    }

    #[test]
    fn persistence_round_trip() {
        let pairs = identity_pairs(80, 3, 7);
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let r = fit(&spec(3, 3, vec![4, 3]), &pairs, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net_t1.manifest");
        save_network(&r.network, &r.scaler, &path).unwrap();
        let (net, scaler) = load_network(&path).unwrap();
        assert_eq!(net.params(), r.network.params());
        assert_eq!(net.running_mean(), r.network.running_mean());
        assert_eq!(scaler, r.scaler);
        let x = [0.1, 0.2, 0.3];
        assert_eq!(
            predict_update(&net, &scaler, &x).unwrap(),
            predict_update(&r.network, &r.scaler, &x).unwrap()
        );
    }
}
