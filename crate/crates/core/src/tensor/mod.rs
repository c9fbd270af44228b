//! Dense `f64` tensors, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod broadcast;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod value;

pub use adam::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Mask, StatUpdate, Tape, Var};
pub use value::Tensor;
