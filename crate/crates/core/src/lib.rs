//! Knowledge-internalized dialog modelling at desk scale.
//!
//! The crate is organised bottom-up: [`numerics`] provides tensors and a
//! differentiation tape, [`corpus`] ingests text, [`model`] is the
//! encoder-decoder dialog model, [`ki`] adds the token-level contrastive
//! objective, [`retriever`] mines token-knowledge alignments, [`metrics`]
//! scores generations and [`analysis`] builds ablation variants and
//! embedding reports.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod ki;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod retriever;
pub mod synthetic;

pub use error::{Error, Result};
