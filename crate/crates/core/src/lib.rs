//! Parallel Monte Carlo tree search.
//!
//! A coordinator runs the tree policy over `M` search trees, hands leaf
//! evaluations to simulation workers and backpropagates the returns. Tree
//! parallelization, leaf and root parallelization, virtual loss, WU-UCT and
//! BU-UCT are all configurations of the same loop (see [`algos`]).

pub mod algos;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod framework;
pub mod rng;
pub mod stats;
pub mod tree;

pub use error::{Error, Result};
