//! Dense f64 tensors, reverse-mode autodiff, Adam and seeded randomness.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adam_step, OptimizerState};
pub use params::{apply_grads, Ctx, ParamStore};
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
