//! Dense `f32` tensors, a tape-based reverse-mode autodiff and AdamW.

mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{AdamWConfig, OptimizerState};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
