//! Reverse-mode automatic differentiation over dense `f64` matrices, with a
//! small MLP and the Adam optimizer on top.

mod adam;
mod check;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{finite_difference_grad, gradcheck, hessian_trace_cross, GradCheck};
pub use mlp::{Activation, Init, Mlp, MlpSpec};
pub use params::{NamedParam, ParamId, ParamStore};
pub use tape::{CustomBackward, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;

