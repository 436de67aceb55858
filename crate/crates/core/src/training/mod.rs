//! Loss, optimization, metrics, and the experimental protocols built on them.

pub mod adam;
pub mod metrics;
pub mod split;
pub mod trainer;

pub use adam::{AdamConfig, AdamState};
pub use metrics::{mae, rmse, Metrics};
pub use split::{stratified_split, Split};
pub use trainer::{
    ablate_sharing, cross_evaluate, evaluate, predict, train, AblationReport, CrossReport, EpochRecord, History,
    Loss, TrainConfig,
};
