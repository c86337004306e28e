//! Reverse-mode automatic differentiation over dense `[B, C, H, W]` tensors,
//! limited to the layer set used by UNet-family regressors, plus Adam and
//! the one-cycle learning-rate schedule.

mod error;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod ops;
pub mod optim;
mod param;
mod real;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckReport, Probes};
pub use graph::{Gradients, Graph, Var};
pub use ops::dense::{Activation, NormMode, RunningStats, BN_EPS, BN_MOMENTUM};
pub use optim::{one_cycle_lr, AdamConfig, EarlyStopping, OneCycle, OptimizerState, PlateauDecay};
pub use param::{Param, ParamId, ParamStore};
pub use real::{matmul, Real};
pub use tensor::Tensor;
