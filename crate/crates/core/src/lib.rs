//! Atomistic QM/MM coupling on lattices: reference configurations, site models,
//! Taylor-expanded Cauchy–Born potentials, matched interatomic potentials and
//! hybrid energy / force-mixing solvers.

pub mod cb_taylor;
pub mod coupling;
pub mod error;
pub mod harness;
pub mod lattice;
pub mod matching;
pub mod mlip;
pub mod predictor;
pub mod refmodel;
pub mod solve;

pub use error::{Error, Result};
