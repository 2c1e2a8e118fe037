//! Finite-state nonlinear filtering through its dual optimal control problem.
//!
//! A hidden continuous-time Markov chain `X` on `{1, …, d}` with generator
//! `A` is observed through `dZ = h(X) dt + dW`. The crate simulates the pair,
//! runs the Zakai filter, solves the dual backward equation for a given
//! control, and checks the duality, value-process and optimality identities
//! by Monte Carlo.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bsde;
pub mod config;
pub mod dual;
pub mod error;
pub mod filter;
pub mod model;
pub mod pathsim;
pub mod rng;
pub mod runner;
pub mod stats;

pub use error::{Error, Result};
