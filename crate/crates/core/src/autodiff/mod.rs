//! Tensor-level reverse-mode differentiation, parameters and the optimizer.

mod adam;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
