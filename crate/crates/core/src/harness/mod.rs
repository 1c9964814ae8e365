//! Training, evaluation and verification front end.

mod checkpoint;
mod checks;
mod config;
mod eval;
mod heatmaps;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use checks::{run_gradchecks, tiny_model_config, Target};
pub use config::{LossSettings, ModelSettings, OptimConfig, RunConfig};
pub use eval::{check_sample, evaluate, evaluate_predictions, predict, Prediction};
pub use heatmaps::{channel_mean, export_heatmaps, heatmap_csv, heatmaps, TAPS};
pub use optim::AdamW;
pub use train::{batch_loss, sequence_gradient, train, EpochRecord, StepRecord, TrainLog, Trainer};
