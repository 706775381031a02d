//! Interleaved labeled time-series: data generation, optimal baselines, a
//! small causal transformer trained from scratch, recall and
//! out-of-distribution evaluation, and edge-pruning circuit discovery.

pub mod circuits;
pub mod datagen;
pub mod dynsys;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod model;
pub mod nn;
pub mod oodlab;
pub mod stats;

pub use error::{CircuitError, DatagenError, DynsysError, EvalError, FormatError, ModelError, OodError};
