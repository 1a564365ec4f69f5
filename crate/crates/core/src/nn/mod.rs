//! Differentiable building blocks with explicit forward/backward passes.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod lora;
pub mod loss;
pub mod ops;
mod param;
mod tensor;

pub use attention::{AttentionMap, AttentionMode, MultiHeadAttention, TokenMixer};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use layers::{Conv1d, ConvStack, Linear};
pub use lora::{LoraAdapter, LoraLayer};
pub use ops::ConvGeometry;
pub use param::{Module, Parameter};
pub use tensor::Tensor;
