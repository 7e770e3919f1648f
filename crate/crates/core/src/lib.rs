//! Tree-structured gated recurrent networks (TreeGRU and bidirectional
//! TreeBiGRU) with structural attention for sentiment classification over
//! constituency treebanks.
//!
//! The crate is organized bottom-up:
//!
//! * [`treebank`]: parenthesized treebank reader and task splits
//! * [`embeddings`]: vocabulary and pretrained word vectors
//! * [`autodiff`]: reverse-mode tape used for every forward pass
//! * [`model`]: the network variants, parameter layout and checkpoints
//! * [`training`]: objective, AdaGrad, dropout, training loop, gradient check
//! * [`cli`]: the `arbo` command-line front end

pub mod autodiff;
pub mod cli;
pub mod embeddings;
pub mod error;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod training;
pub mod treebank;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
