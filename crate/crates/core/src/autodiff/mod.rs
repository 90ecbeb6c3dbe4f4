//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitives as they execute and replays them in reverse
//! to accumulate gradients into parameter leaves. Tapes are rebuilt every
//! iteration; nothing is cached across runs.

mod adam;
mod gradcheck;
pub mod linalg;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{logsumexp_slice, Gradients, OpKind, Tape};
pub use tensor::{ParamId, Params, Tensor};
