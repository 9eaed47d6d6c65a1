//! Reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheck};
pub use optim::{clamp01, clamp01_in_place, sgd_step};
pub use params::{BoundParams, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
