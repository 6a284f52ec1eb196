//! Ensemble smoothers for subsurface parameter estimation.
//!
//! Two update rules share one assimilation loop: the Kalman-formula update and
//! a learned update, where a residual network trained on pairs of ensemble
//! members maps innovations to parameter updates. Both can be iterated with
//! multiple data assimilation. The crate also ships the forward models used
//! by the bundled case studies: steady and transient confined groundwater
//! flow, advection-dispersion transport, truncated Karhunen-Loeve Gaussian
//! fields, and direct-sampling multiple-point simulation.

pub mod ensemble;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod neural;
pub mod obs;
pub mod param;
pub mod rng;
pub mod smoother;
pub mod transport;

pub use ensemble::{ensemble_stats, Ensemble};
pub use error::{Error, Result};
pub use grid::{Grid2D, ScalarField};
pub use obs::{ObsKind, ObsLabel, ObservationSet};
pub use rng::RngStream;
