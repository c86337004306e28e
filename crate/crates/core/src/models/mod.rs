//! UNet-family regressors: architectures, training with best-checkpoint
//! selection, checkpoint files, and full-raster prediction.

mod checkpoint;
mod config;
mod net;
mod predict;
mod train;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC};
pub use config::{ModelConfig, ModelKind};
pub use net::{build_model, se_block, Model, SeWeights};
pub use predict::{predict_raster, PREDICT_PATCH};
pub use train::{evaluate_loss, train, EpochLog, TrainConfig, TrainOutcome};
