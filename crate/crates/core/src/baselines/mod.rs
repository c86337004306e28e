//! Pixelwise regressors used as reference points for the networks.

mod artifact;
mod forest;
mod knn;
mod mlr;
mod table;

pub use artifact::{predict_stack, BaselineArtifact, BaselineKind, BaselineModel, BASELINE_MAGIC};
pub use forest::{rf_fit, rf_predict, RandomForest, RfConfig, Tree};
pub use knn::{knn_fit, knn_predict, KnnModel, DEFAULT_K};
pub use mlr::{mlr_fit, mlr_predict, MlrModel, RIDGE_LAMBDA};
pub use table::{feature_rows, PixelTable};
