//! Invariant classifiers learned from a single fine-labeled domain plus
//! auxiliary domains that carry only coarse labels.

mod analytic;
pub mod baselines;
pub mod crossval;
pub mod datagen;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod models;
pub mod objective;
pub mod theory;

pub use error::{Error, Result};
