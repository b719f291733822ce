//! Continual learning for multi-weather image restoration at desk scale.
//!
//! The pipeline: a task-similarity valve decides whether an incoming
//! degradation stream is a known task or a new one; a dynamic library of
//! adapter experts grows one expert per new task and reuses frozen ones
//! for old tasks; a multi-level loss (reconstruction, contrast, output
//! and feature distillation, adapter regularization, expert diversity)
//! trains each task without erasing its predecessors. Everything runs on
//! a small from-scratch f64 autodiff core so that runs are deterministic
//! and bit-reproducible.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod valve;

pub use error::{Error, Result};
