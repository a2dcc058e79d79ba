//! One-shot pruning of fully connected networks driven by lq soft sparsity.
//!
//! The crate trains a dense regression network, then re-fits every neuron's
//! incoming weights as a sparse linear combination of the previous layer's
//! outputs, walking from the output layer back to the input. Two per-neuron
//! strategies are provided: a magnitude rule whose keep-count comes from the
//! sparsity index `||w||_1 / ||w||_q`, and an l1-penalized (LASSO) re-fit. A
//! fixed-proportion magnitude baseline and evaluators for the lq error bounds
//! round out the toolkit.

pub mod bounds;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod network;
pub mod pruner;
pub mod solvers;
pub mod sparsity;
pub mod trainer;

pub use error::{Error, Result};
