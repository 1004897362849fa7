//! Minimal dense tensors, reverse-mode differentiation, and Adam-family
//! optimizers.

pub mod dtnsr;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use optim::{Adam, AdamW, OptimError};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::SeedKey;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor, TensorError};
