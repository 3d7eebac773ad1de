//! Data loading, training, checkpoints and parse evaluation for PRPN models.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod parse;
pub mod suite;
pub mod synth;
pub mod train;
pub mod treebank;

pub use prpn_core;
pub use error::{Error, Result};
