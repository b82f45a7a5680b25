//! Minimal dense-tensor engine: row-major `f64` tensors, a rebuild-per-step
//! tape with reverse-mode differentiation, and AdamW.

mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{gelu, gelu_grad, Gradients, Graph, Segment, Var};
pub use optim::{adamw_step, adamw_step_dense, cosine_lr, AdamWConfig, LrSchedule, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
