//! Tensors, reverse-mode autodiff and the SGD optimizer.

mod conv;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use optim::{LrStep, Sgd, SgdConfig};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::stable_softmax_nll;
pub use tensor::Tensor;
