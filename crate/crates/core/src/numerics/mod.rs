//! Dense tensors, a reverse-mode tape and Adam: just enough machinery to
//! train small MLPs deterministically in `f64`.

mod adam;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::euclidean;
