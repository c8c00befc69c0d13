//! Dense `f64` tensors with tape-based reverse-mode differentiation,
//! including differentiation through a parameter update.

mod params;
mod tape;
mod value;

pub use params::{Gradients, ParamView, ParameterSet};
pub use tape::{sigmoid, Tape, Var};
pub use value::{broadcast_shape, Tensor};
