//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_multi, DEFAULT_STEP};
pub use tape::{forward_backward, logsumexp, Gradients, Tape, Var};
pub use tensor::Tensor;
