//! Model-guided evolutionary neural architecture search.
//!
//! Architectures are variable-length sequences of blocks drawn from a fixed
//! block library. A small decoder-only sequence model is trained on encoded
//! architecture corpora to predict the next layer; during the genetic search
//! a fraction of each individual's blocks is eliminated and refilled from the
//! model's prediction, lifted from a layer to a block by a fully connected
//! classifier.
//!
//! Module map:
//!
//! - [`arch`]: layer/block/architecture data model, canonical keys,
//!   vocabulary, token encoding and shape arithmetic.
//! - [`library`]: the fifteen-entry block library and its instantiation rules.
//! - [`corpus`]: corpus ingestion and generation, training-pair windowing.
//! - [`gpt`]: the autoregressive model, its training loop and sampling.
//! - [`fcn`]: the layer-to-block selector.
//! - [`reconstruct`]: elimination schedule and structure prediction.
//! - [`evolution`]: the genetic search loop.
//! - [`evaluation`]: fitness evaluators and correlation statistics.
//! - [`reporting`]: ablation drivers, run manifests and summaries.

pub mod arch;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod evolution;
pub mod fcn;
pub mod gpt;
pub mod library;
pub mod par;
pub mod reconstruct;
pub mod reporting;
pub mod rng;

pub use error::{Error, Result};
