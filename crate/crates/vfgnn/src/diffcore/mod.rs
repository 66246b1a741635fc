//! Dense/sparse tensor arithmetic with a recorded reverse-mode
//! differentiation tape that supports differentiating its own backward pass.
//!
//! All arithmetic is 64-bit; summation order is fixed (row-major sequential)
//! so repeated runs are bit-identical.

mod optim;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use optim::{adagrad_step, adam_step, sgd_step, AdaGradState, AdamState};
pub use rng::SeedStream;
pub use sparse::SparseMatrix;
pub use tape::{cross_entropy_soft, flatten_concat, Node, Tape};
pub use tensor::Tensor;

use thiserror::Error;

/// Differentiation and tensor arithmetic failures.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("graph error: {0}")]
    Graph(String),
}
