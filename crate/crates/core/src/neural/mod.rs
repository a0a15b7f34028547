//! Sequence-to-sequence duration regressors.
//!
//! Three architectures share one interface: a window of `n_back` five-feature
//! rows goes in, `m_fwd` normalized durations in (-1, 1) come out. Gradients
//! come from a small reverse-mode tape ([`tape`]); training uses Adam on the
//! mean absolute error.

mod model;
pub mod tape;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{positional_encoding, Bound, DropoutCtx, Model, Params};
pub use train::{
    holdout_split, loss_and_gradients, predict_dataset, train, Adam, Checkpoint, EpochRecord, Predictions,
};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("invalid model or training config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite gradient in epoch {epoch}")]
    NonFiniteGradient { epoch: usize },
    #[error("non-finite loss in epoch {epoch}; training aborted")]
    NonFiniteLoss { epoch: usize, checkpoint: Box<Checkpoint> },
    #[error("checkpoint carries no normalization parameters")]
    MissingNormalization,
    #[error("checkpoint serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Gru,
    Lstm,
    Transformer,
}

impl std::str::FromStr for Arch {
    type Err = NeuralError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(Arch::Gru),
            "lstm" => Ok(Arch::Lstm),
            "transformer" | "tf" => Ok(Arch::Transformer),
            other => Err(NeuralError::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Gru => "gru",
            Arch::Lstm => "lstm",
            Arch::Transformer => "transformer",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RnnConfig {
    pub nodes_per_layer: usize,
    pub layers: usize,
    pub dropout: f64,
}

impl Default for RnnConfig {
    fn default() -> Self {
        Self { nodes_per_layer: 100, layers: 4, dropout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub heads: usize,
    pub head_size: usize,
    pub ff_dim: usize,
    pub blocks: usize,
    pub mlp_units: usize,
    pub dropout: f64,
    pub positional_encoding: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self { heads: 2, head_size: 256, ff_dim: 1024, blocks: 4, mlp_units: 1024, dropout: 0.1, positional_encoding: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_back: usize,
    pub m_fwd: usize,
    pub rnn: RnnConfig,
    pub transformer: TransformerConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Gru,
            n_back: 5,
            m_fwd: 2,
            rnn: RnnConfig::default(),
            transformer: TransformerConfig::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidConfig(m.to_string()));
        if self.n_back == 0 || self.m_fwd == 0 {
            return bad("n_back and m_fwd must be positive");
        }
        match self.arch {
            Arch::Gru | Arch::Lstm => {
                if self.rnn.nodes_per_layer == 0 || self.rnn.layers == 0 {
                    return bad("rnn sizes must be positive");
                }
                if !(0.0..1.0).contains(&self.rnn.dropout) {
                    return bad("dropout must lie in [0, 1)");
                }
            }
            Arch::Transformer => {
                let t = &self.transformer;
                if t.heads == 0 || t.head_size == 0 || t.ff_dim == 0 || t.blocks == 0 || t.mlp_units == 0 {
                    return bad("transformer sizes must be positive");
                }
                if !(0.0..1.0).contains(&t.dropout) {
                    return bad("dropout must lie in [0, 1)");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    #[default]
    Mae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub loss: Loss,
    /// Share of training pairs held out (from the end) for the validation curve.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            optimizer: Optimizer::Adam,
            learning_rate: 0.001,
            loss: Loss::Mae,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(NeuralError::InvalidConfig("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NeuralError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(NeuralError::InvalidConfig("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
