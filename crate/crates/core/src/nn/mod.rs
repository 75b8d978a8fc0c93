//! Small autodiff engine and layers backing every network in the crate.

mod adam;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use layers::{timestep_embedding, Conv2d, GroupNorm, Linear, ResBlock};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{matmul, MatRef, Scalar, Tensor};
