//! Trainable residual network mapping innovations to parameter updates.

pub mod adam;
pub mod fit;
pub mod network;
pub mod scaler;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{fit, load_network, predict_update, predict_updates, save_network, FitResult, TrainConfig, TrainHistory};
pub use network::{loss_and_gradients, BlockKind, Network, NetworkSpec, OutputActivation};
pub use scaler::Scaler;
