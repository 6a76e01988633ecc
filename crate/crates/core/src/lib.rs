//! Markov chain approximation of equilibrium mean-variance portfolios with
//! costly attention to signals about a hidden Markov regime.
//!
//! The wealth/belief state is discretized on a lattice ([`lattice`]), the
//! controlled diffusion is replaced by a locally consistent chain
//! ([`kernel`]), and the coupled value/expectation recursion is solved
//! backwards in time ([`solver`]). [`oracle`] checks the results by Monte Carlo.

// Negated comparisons are deliberate: they reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filter;
pub mod kernel;
pub mod lattice;
pub mod market;
pub mod oracle;
pub mod solver;

pub use error::{Error, Result, SchemeError};
pub use filter::Belief;
pub use lattice::{build_grid, GridSpec, Lattice, LatticeNode};
pub use market::{ControlPoint, ObjectiveConvention, RegimeModel};
pub use oracle::McSummary;
pub use solver::{solve, ControlGrid, SolutionFields};
