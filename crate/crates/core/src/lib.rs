//! Attention-alignment training on a synthetic shortcut benchmark, with
//! subgroup fairness evaluation.
//!
//! Modules, bottom-up: [`diffcore`] (dense grids and hand-written
//! derivatives), [`model`] (cross-attention classifier), [`losses`]
//! (cross-entropy and dice with false-positive suppression), [`metrics`]
//! (AUC, hit rate, fairness gaps, aggregation), [`synthdata`] (generator and
//! dataset files) and [`harness`] (training, sweeps, reports). [`cli`] wires
//! them to the `egl` binary.

pub mod cli;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;

pub use error::{Error, Result};
