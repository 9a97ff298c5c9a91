//! Encoder–decoder segmentation network with polynomial (operational)
//! decoder layers, built on a small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, BatchStats, ElementwiseOp, Graph, OpKind, ReduceOp, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::RunConfig;
pub use data::{GrayImage, SampleRecord, Split};
pub use error::{CheckpointError, Error, IndexError, PgmError, Result};
pub use kernels::Padding;
pub use layers::{BatchNormLayer, Conv2d, OperLayer};
pub use loss::LossConfig;
pub use metrics::{ConfusionCounts, Granularity, MetricsReport};
pub use model::{ModelConfig, OSegNetModel, ParamCount};
pub use optim::Adam;
pub use tensor::Tensor;

/// Version string recorded in run logs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
