//! Dense `f64` tensors with reverse-mode differentiation.

mod adam;
mod array;
mod conv;
pub(crate) mod gemm;
pub mod gradcheck;
pub(crate) mod ops;
mod tape;

pub use adam::AdamState;
pub use array::Tensor;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use ops::Activation;
pub use tape::{Gradients, Tape, Var};

#[cfg(test)]
mod tests;
