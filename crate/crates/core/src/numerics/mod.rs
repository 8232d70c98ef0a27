//! Dense tensors, reverse-mode gradients, finite-difference checks and AdamW.

mod adamw;
mod gradient;
mod params;
mod tape;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use gradient::{evaluate, evaluate_with_gradients, finite_diff_gradient, max_relative_error};
pub use params::ParamSet;
pub use tape::{Tape, Var, LAYER_NORM_EPS};
pub use tensor::{cosine, dot, l2_norm, l2_norm_f64, normalized, Scalar, Tensor};
