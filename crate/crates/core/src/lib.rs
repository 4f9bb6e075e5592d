//! Coupled local/global region detection head with a small synthetic-data
//! training and evaluation stack.

pub mod ablation;
pub mod boxes;
pub mod commands;
pub mod checkpoint;
pub mod context;
pub mod config;
pub mod coupling;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod nn;
pub mod proposals;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
