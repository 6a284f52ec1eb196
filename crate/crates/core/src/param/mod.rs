//! Parameterizations of the unknown conductivity field.

pub mod ds;
pub mod kl;
pub mod ti;

pub use ds::{direct_sampling, DsParams};
pub use kl::{build_kl_basis, kl_realize, CovarianceSpec, KlBasis};
pub use ti::{generate_channel_ti, ChannelSpec, TrainingImage};
