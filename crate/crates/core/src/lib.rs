//! Channel extrapolation for fluid antenna systems.
//!
//! Covers the spatially correlated port channel model, masked tensorization,
//! the CANet extrapolation network with its building blocks, amplitude
//! perturbation augmentation, the training objectives and a deterministic
//! train/evaluate harness.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod channel;
pub mod error;
pub mod fft;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
