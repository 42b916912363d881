//! Contrastive-learning smart contract vulnerability detection.
//!
//! Stage one pairs every training contract with a vulnerable partner and
//! trains a shared encoder with a margin contrastive loss plus a masked
//! language modelling term. Stage two fine-tunes the encoder and classifies
//! each contract from its pooled token features and its correlation vector.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod training;

pub use config::RunConfig;
pub use error::{ClearError, Result};
