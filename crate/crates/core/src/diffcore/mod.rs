//! Minimal reverse-mode autodiff: dense f64 arrays, an eager tape, and a
//! finite-difference checker. Just enough surface for the model in this
//! workspace — no broadcasting rules beyond the few ops that need them.

mod array;
mod gradcheck;
mod store;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff, grad_check, rel_err};
pub use store::{fan_in_normal, scaled_normal, ParamId, ParamStore};
pub use tape::{NodeId, Parameter, Tape};
