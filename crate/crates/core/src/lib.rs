//! Reactive collision avoidance under non-Gaussian uncertainty.
//!
//! The planner scores each control on a fixed grid by how far the sampled
//! distribution of velocity-obstacle violations is from a point mass at
//! zero, measured as the squared maximum mean discrepancy in an RBF
//! kernel space, plus goal tracking and control effort. The [`sim`] module
//! runs it in closed loop and in Monte-Carlo batches.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod mmd;
pub mod noise;
pub mod planner;
pub mod sim;
pub mod vo;

pub use error::{Error, Result};
