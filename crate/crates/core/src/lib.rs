//! Multi-task ECG analysis with a period-aware mixture of experts.
//!
//! The pipeline: records are z-normalized per lead, R-peaks are detected and
//! the signal is cut into length-normalized beats. A multi-extractor branch
//! summarizes the whole signal while morphology and rhythm experts work on
//! the beats; a task-conditioned gate weights the experts, attention mixes
//! them, and a branch-level gate fuses both paths before LoRA-adapted task
//! heads.

pub mod beats;
pub mod error;
pub mod model;
pub mod nn;
pub mod signal;
pub mod training;
mod scalar;

pub use error::{Error, Result};
pub use model::{EcgMoe, ModelConfig, Task};
pub use training::{MetricsReport, TrainConfig};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;

pub type Model32 = model::EcgMoe<f32>;
pub type Model64 = model::EcgMoe<f64>;
