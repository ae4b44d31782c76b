//! Generalized contrastive alignment.
//!
//! Contrastive objectives viewed as matching a transport plan, computed from
//! an augmentation kernel by (un)balanced entropic optimal transport, against
//! a target plan. The crate provides the solvers, the loss family with
//! envelope gradients, target plans, representation metrics and a small
//! self-supervised training harness.

pub mod error;
pub mod kernel;
pub mod losses;
pub mod matio;
pub mod matrix;
pub mod metrics;
pub mod plans;
pub mod sampling;
pub mod solver;
pub mod train;
pub mod uot;
pub mod verify;

pub use error::{GcaError, Result};
pub use matrix::DenseMatrix;
