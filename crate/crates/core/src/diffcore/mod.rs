//! Deterministic tensors, reverse-mode differentiation, seeded initialization
//! and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod param;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use checkpoint::{Checkpoint, Dtype};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport};
pub use graph::{AttentionDims, Gradients, Graph, Var};
pub use param::{ParamClass, ParamId, ParamStore, Parameter};
pub use rng::{seeded_init, InitDistribution, RngState};
pub use rope::rope_apply;
pub use tensor::Tensor;
