//! Simulation and numerical verification toolkit for a self-similar
//! growth-fragmentation process, the positive self-similar Markov process
//! driving its cells, and two companion models (a continuous-state branching
//! process and a discrete labelled tree) that share its scaling constants.
//!
//! The crate is organised in layers: [`numeric`] holds the gamma function,
//! adaptive quadrature, and cancellation-safe building blocks everything
//! else reuses; higher layers evaluate cumulant functions, simulate paths,
//! and run the statistical verification experiments.

pub mod cells;
pub mod csbp;
pub mod error;
pub mod exponents;
pub mod lamperti;
pub mod levy;
pub mod numeric;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
