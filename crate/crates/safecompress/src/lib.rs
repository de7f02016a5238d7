//! Test-driven safe compression of neural classifiers.
//!
//! Starts from a sparsity budget, trains a masked network with dynamic
//! sparse updates, and each round pits four candidate topologies against
//! simulated membership-inference attackers, carrying forward the one
//! with the best task-accuracy/attack-accuracy trade-off.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod optim;
pub mod orchestrate;
pub mod report;
pub mod select;
pub mod sparse;
pub mod tensor;

pub use error::{Error, Result};
