//! Networked online learning control with a locally growing tree of Gaussian
//! processes.
//!
//! * [`gp`]: exact GP regression with incremental Cholesky updates.
//! * [`tree`]: the LoG-GP tree, its aggregated predictions and error bound.
//! * [`active_set`]: sampling the leaves a reference tube may touch.
//! * [`network`]: the interval-based exchange with the cloud.
//! * [`control`]: feedback linearization and its ultimate bound.
//! * [`plant`]: canonical-form plants and references.
//! * [`experiment`]: configuration and the closed-loop runner.

pub mod active_set;
pub mod control;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod gp;
pub mod network;
pub mod plant;
pub mod rng;
pub mod tree;

pub use error::{Error, Result};
