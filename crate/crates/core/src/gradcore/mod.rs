//! Reverse-mode differentiation over dense `f64` arrays.

pub mod gradcheck;
pub mod params;
pub mod special;
mod tape;
mod tensor;

pub use gradcheck::{GradCheck, GradCheckReport};
pub use params::{BoundParams, Parameters};
pub use tape::{sigmoid, softplus, Elementwise, Extremum, Gradients, Tape, Var, LEAKY_SLOPE};
pub use tensor::Tensor;
