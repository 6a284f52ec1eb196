//! Ensemble smoother updates and the multiple-data-assimilation loop.

pub mod constraints;
pub mod dl;
pub mod kalman;
pub mod mda;
pub mod pairs;
pub mod run;

pub use constraints::{Bound, ParamConstraints};
pub use dl::es_dl_update;
pub use kalman::{es_kalman_update, innovations, kalman_context, kalman_corrections, KalmanContext};
pub use mda::{mda_schedule, MdaSchedule};
pub use pairs::{generate_training_pairs, pair_count, TrainingPairs};
pub use run::{
    evaluate_ensemble, run_assimilation, AssimilationConfig, AssimilationHistory, ForwardModel, IterationLog, Method,
    TrainedMapping,
};
