//! Detector head, training, evaluation and experiment drivers.

pub mod config;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod train;

pub use config::{EvalConfig, ModelConfig, RegressionLoss, RunConfig, TrainConfig};
pub use eval::{evaluate_ap, Detection, EvalResult};
pub use model::{head_forward, Detector, HeadParams, LevelOutput};
pub use train::{train, EpochLoss, TrainOutcome};
