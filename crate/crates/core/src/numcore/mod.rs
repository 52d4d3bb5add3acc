//! Dense matrices, a reverse-mode tape with second-order support, MLPs and Adam.

mod matrix;
mod mlp;
mod params;
mod tape;

pub use matrix::Matrix;
pub use mlp::{
    backward, forward, input_gradient_norm_grad, penalty_on_tape, Activation, ForwardPass, MlpSpec,
};
pub use params::{adam_step, Adam, Bound, Grads, ParamStore};
pub use tape::{Gradients, Tape, Var};
