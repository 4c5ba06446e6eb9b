//! Training harness: configuration, model assembly, pretraining stage,
//! the main loop and the ablation runner.

pub mod ablate;
pub mod config;
pub mod model;
pub mod pretrain;
pub mod train;

pub use ablate::{ablate, ablation_jobs, to_csv, AblationRow, AblationTable};
pub use config::{FeatureMode, TrainConfig};
pub use model::{ApcModel, ModelShape, Stream};
pub use pretrain::{pretrain, PretrainOutcome};
pub use train::{pretrain_and_train, train, RunReport, TraceEvent, TrainOutcome};
