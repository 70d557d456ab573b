//! Adaptive-inference classification of 1-D spectral curves.
//!
//! The crate provides a small reverse-mode autodiff engine, early-exit
//! residual networks with optional position-adaptive halting, a
//! self-distillation training loop, anytime and budgeted-batch exit
//! policies, a synthetic spectral dataset generator and a logical-time
//! edge/cloud offloading simulator.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod pa;
pub mod policy;
pub mod sim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Result, ScaiError};
pub use model::{CostTable, ExitOutcome, ExitRunner, ScaiConfig, ScaiModel};
