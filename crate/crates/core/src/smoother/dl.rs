//! Ensemble smoother update with a learned innovation-to-update mapping.

use nalgebra::DMatrix;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::neural::fit::predict_updates;
use crate::neural::{Network, Scaler};
use crate::obs::ObservationSet;
use crate::rng::RngStream;
use crate::smoother::constraints::ParamConstraints;
use crate::smoother::kalman::innovations;

/// Updated parameters `m_i + G(y_obs + alpha eps_i - f(m_i))`, clamped.
pub fn es_dl_update(
    e: &Ensemble,
    net: &Network,
    scaler: &Scaler,
    obs: &ObservationSet,
    alpha: f64,
    constraints: &ParamConstraints,
    rng: &mut RngStream,
) -> Result<DMatrix<f64>> {
    if net.spec().output_dim != e.n_params() {
        return Err(Error::DimensionMismatch {
            what: "network output vs parameter count",
            expected: e.n_params(),
            found: net.spec().output_dim,
        });
    }
    let d = innovations(e, obs, alpha, rng)?;
    let mut m = e.params() + predict_updates(net, scaler, &d)?;
    constraints.apply(&mut m)?;
    Ok(m)
}
