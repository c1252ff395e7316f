//! Minimal dense-tensor numerics with a reverse-mode gradient engine.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_multi};
pub use optim::{AdamW, CosineWarmup};
pub use params::{fan_in_uniform, Bound, ParamId, ParamStore};
pub use tape::{log_sigmoid, log_sum_exp, sigmoid, softmax_in_place, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;
