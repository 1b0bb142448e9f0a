//! Dense f64 tensors with a define-by-run reverse-mode gradient tape.

pub mod check;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{finite_difference_check, param_gradient_check, relative_error, CoordinateCheck};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
