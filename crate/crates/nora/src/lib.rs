//! Row-geometric optimizers (Nora, Muon, RMNP, Mano, Adam) with
//! deterministic f64 kernels, synthetic tasks, a training harness, and a
//! matmul-cost benchmark.
//!
//! All numeric kernels accumulate in a fixed sequential order, so results
//! are bit-identical across runs and across the `parallel` feature, which
//! only fans out independent work items (seeds, widths, grid points).

pub mod bench;
pub mod config;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tasks;

pub use error::{Error, Result};
pub use exec::Execution;
pub use matrix::Matrix;
pub use rng::Rng;
