//! Gradient-consistency masked training across environments.
//!
//! The crate provides the consistency statistics, linear and MLP trainers
//! (ERM, CGLearn and a linear IRMv1 baseline), a linear structural-equation
//! benchmark generator, K-means environment discovery for real tabular data,
//! CSV loading, evaluation metrics with Welch's t-test, and the experiment
//! runner behind the `cglearn` command-line tool.

pub mod consistency;
pub mod data_io;
pub mod dataset;
pub mod envcluster;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod lingrad;
pub mod mlp;
pub mod rng;
pub mod synthgen;

pub use dataset::{EnvironmentSet, TabularDataset, Task};
pub use error::{Error, Result};
