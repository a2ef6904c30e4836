//! A numerical-optimization laboratory for overparameterized two- and
//! three-layer ReLU learners: dense numerics, concept-class targets, learner
//! networks with pseudo-network and kernel baselines, SGD variants with
//! explicit regularization and smoothing, constructive-approximation
//! machinery, structural diagnostics, and a config-driven experiment harness.

pub mod construct;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nets;
pub mod numerics;
pub mod targets;
pub mod train;

pub use error::{LabError, Result};
