//! Multi-domain CTR models with multiple embedding tables, element-wise prior
//! gating and a cross-expert covariance penalty, on a small f64 autodiff core.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{Batch, Dataset, Sample, Schema, SyntheticSpec};
pub use error::{Error, Result};
pub use losses::{LossConfig, PairSet};
pub use model::{GateKind, Model, ModelConfig, Variant};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use trainer::{RunConfig, TrainConfig};
