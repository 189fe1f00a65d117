//! Training: optimizer steps over bags, validation-driven early stopping,
//! checkpoints, cross-validation and ROI scoring.

mod checkpoint;
mod config;
mod cv;
mod fit;
mod optim;
mod roi;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{OptimizerKind, TrainConfig};
pub use cv::{cross_validate, fold_config, plan_folds, run_fold, CvConfig, CvReport, FoldOutcome, MeanMetrics};
pub use fit::{evaluate, mean_loss, predict, train_fold, TrainHistory};
pub use optim::Optimizer;
pub use roi::{score_roi, RoiCell, RoiMap};
