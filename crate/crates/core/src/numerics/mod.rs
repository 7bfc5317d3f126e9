//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, LeafReport};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, sigmoid, softplus, Tensor};

pub(crate) use tape::gelu;
