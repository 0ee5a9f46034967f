//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod optim;
mod params;
mod tape;
mod value;

pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{logsumexp_sorted, softmax_rows, Gradients, OpKind, Tape, Var};
pub use value::Tensor;
