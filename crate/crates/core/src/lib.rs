//! Continual-learning experiments: permuted/split MNIST with gating and
//! synaptic stabilization, and a gated LSTM agent on cognitive tasks.

pub mod analysis;
pub mod checkpoint;
pub mod cogtask;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gating;
pub mod mlp;
pub mod rnn;
pub mod stabilization;
pub mod trainer;

pub use error::{Error, Result};
