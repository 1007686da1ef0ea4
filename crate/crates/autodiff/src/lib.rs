//! Numeric substrate: dense `f64` tensors, a define-by-run reverse-mode
//! tape, Adam, dropout masks, seeded RNG streams and finite-difference
//! gradient checking.

pub mod adam;
pub mod dropout;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod rng;
pub mod tensor;

pub use adam::AdamState;
pub use dropout::dropout_mask;
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use graph::{sigmoid, softmax, Gradients, Graph, Var};
pub use params::ParameterSet;
pub use rng::{derive_seed, rng_from_seed, stream, Rng};
pub use tensor::Tensor;
