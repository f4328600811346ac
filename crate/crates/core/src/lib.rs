//! Differentiable architecture search for spatio-temporal video classifiers.
//!
//! A searchable cell is a small DAG whose edges carry softmax-weighted
//! mixtures of eight (2+1)D candidate operators. Architecture weights and
//! network weights are optimized by alternating gradient steps, the result is
//! discretized into a [`cell::Genotype`], and a deeper network built from that
//! genotype is trained from scratch.

pub mod autodiff;
pub mod cell;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod operators;
pub mod optim;
pub mod params;
pub mod search;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, NormConfig, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor5D};
