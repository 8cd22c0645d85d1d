//! Atmospheric motion vector estimation from a pair of multi-layer images.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod diffops;
pub mod energy;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod lbfgs;
pub mod selftest;
pub mod spline;
pub mod synth;
pub mod wavelet;

pub use admm::{run_variant, AdmmMode, AdmmOptions, AdmmOutput, Variant};
pub use energy::SolverConfig;
pub use error::{AmvError, Result};
pub use eval::{run_benchmark, EvalReport};
pub use grid::*;
pub use synth::{generate_dataset, SyntheticDataset, SyntheticSpec};
