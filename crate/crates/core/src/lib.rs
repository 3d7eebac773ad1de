//! Core of a structure-inducing recurrent language model.
//!
//! The crate is `no_std` (it needs `alloc`) and contains everything that is
//! pure computation:
//!
//! * [`tensor`]: dense tensors with a reverse-mode autodiff graph,
//! * [`parsing`]: syntactic distances and stick-breaking gates,
//! * [`reading`]: memory tapes, structured attention and the recurrent update,
//! * [`predict`]: next-distance estimate and next-token logits,
//! * [`model`]: the assembled language model with carried state,
//! * [`optim`]: Adam, gradient clipping and the plateau schedule,
//! * [`tree`]: tree decoding, dependency ranges and bracket scoring,
//! * [`gradcheck`]: finite-difference verification of model gradients,
//! * [`oracle`]: randomized checks of the gating and tree identities.
//!
//! File formats, corpora, the training driver and the command line live in
//! the companion `prpn` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod parsing;
pub mod predict;
pub mod reading;
mod real;
pub mod tensor;
pub mod tree;

pub use error::{Error, Result};
pub use model::{CarryState, ForwardOptions, Model, ModelConfig, TokenBatch};
pub use params::{ParamId, ParamSet};
pub use real::Real;
pub use tensor::{Graph, Tensor, Var};
