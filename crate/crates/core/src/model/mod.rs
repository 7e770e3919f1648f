//! Tree-structured GRU networks.
//!
//! Two recurrent variants share one parameter layout scheme:
//!
//! * `TreeGru`: a bottom-up pass where each node interpolates the sum of its
//!   children's states with a tanh candidate, gated per child position.
//! * `TreeBiGru`: the same upward pass followed by a top-down pass in which
//!   each node combines its own upward state with its parent's downward state.
//!
//! Either variant can pool all node representations with structural
//! attention to form a sentence vector that replaces the root's classifier
//! input.

mod checkpoint;
mod forward;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use checkpoint::{
    checkpoint_precision, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
};
pub use forward::{
    attention_pool, downward_pass, infer, predict_nodes, run_tree, upward_pass, AttentionResult, AttentionVars,
    DownState, Dropout, FlatNode, FlatTree, Forward, GateValues, Inference, NodeStates, TreeRun, UpState,
};
pub use params::{
    count_parameters, init_params, tensor_specs, ModelParams, ParamCount, Tensor, TensorKind, TensorSpec,
    CLASSIFIER_INIT_SCALE, RECURRENT_INIT,
};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    TreeGru,
    TreeBiGru,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::TreeGru => "treegru",
            Variant::TreeBiGru => "treebigru",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treegru" => Ok(Variant::TreeGru),
            "treebigru" => Ok(Variant::TreeBiGru),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// How node similarity scores become attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionNorm {
    /// Exponential normalization.
    #[default]
    Softmax,
    /// Scores divided by their sum.
    Linear,
}

impl AttentionNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionNorm::Softmax => "softmax",
            AttentionNorm::Linear => "linear",
        }
    }
}

impl FromStr for AttentionNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionNorm::Softmax),
            "linear" => Ok(AttentionNorm::Linear),
            other => Err(Error::Config(format!("unknown attention norm `{other}`"))),
        }
    }
}

/// Architecture and dimensions of one network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub attention: bool,
    pub attention_norm: AttentionNorm,
    /// Hidden and embedding width.
    pub dim: usize,
    pub vocab_size: usize,
    pub classes: usize,
    /// Maximum number of children per node; one weight set per position.
    pub arity: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, attention: bool, dim: usize, vocab_size: usize, classes: usize) -> Self {
        ModelConfig {
            variant,
            attention,
            attention_norm: AttentionNorm::Softmax,
            dim,
            vocab_size,
            classes,
            arity: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dimension must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        if self.arity == 0 {
            return Err(Error::Config("arity must be at least 1".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocabulary must contain UNK".into()));
        }
        Ok(())
    }

    /// Width of a node representation fed to attention.
    pub fn representation_dim(&self) -> usize {
        match self.variant {
            Variant::TreeGru => self.dim,
            Variant::TreeBiGru => 2 * self.dim,
        }
    }

    /// Human-readable variant name, e.g. `treebigru+attention`.
    pub fn label(&self) -> String {
        if self.attention {
            format!("{}+attention", self.variant)
        } else {
            self.variant.to_string()
        }
    }
}
