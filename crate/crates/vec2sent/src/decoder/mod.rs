//! The conditional language model: a multi-layer LSTM that learns to
//! reconstruct a token sequence from its frozen sentence embedding, and
//! greedily generates text from arbitrary vectors.
//!
//! Two conditioning modes are supported. In `concat` mode the sentence vector
//! is appended to every input word embedding; in `init_state` mode a learned
//! linear map per layer turns the sentence vector into the initial hidden
//! state and the vector is not seen again after step 0. The output head is
//! either a plain softmax or a mixture of softmaxes.

mod checkpoint;
mod model;
mod params;
mod train;

pub use checkpoint::{DecoderCheckpoint, TrainedDecoder, CHECKPOINT_MAGIC};
pub use model::{DecoderModel, RecurrentState, TrainExample};
pub use train::{train, Adam, EpochRecord, Hyperparams, TrainingMeta};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSequence;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    BadConfig(String),
    #[error("conditioning vector has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token id {id} is out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("encoder failed during training: {0}")]
    Encode(#[from] crate::encoders::EncoderError),
    #[error("checkpoint file {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("checkpoint expects vocabulary digest {expected}, got {got}")]
    VocabDigestMismatch { expected: String, got: String },
    #[error("vocabulary has {got} tokens but the config declares {expected}")]
    VocabSizeMismatch { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("token sequence error: {0}")]
    Sequence(#[from] crate::corpus::CorpusError),
}

/// How the sentence embedding enters the recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Appended to every input word embedding.
    Concat,
    /// Linearly mapped into each layer's initial hidden state.
    InitState,
}

/// Output head producing the next-token distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Softmax,
    /// Mixture of softmaxes with `mos_components` components.
    Mos,
}

fn default_mos_components() -> usize {
    5
}

fn default_max_gen_len() -> usize {
    20
}

/// Architecture of the conditional decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    /// Width of the conditioning vector; must equal the encoder dimension.
    pub cond_dim: usize,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub conditioning: Conditioning,
    pub head: HeadKind,
    #[serde(default = "default_mos_components")]
    pub mos_components: usize,
    #[serde(default = "default_max_gen_len")]
    pub max_gen_len: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), DecoderError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("cond_dim", self.cond_dim),
            ("word_dim", self.word_dim),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("max_gen_len", self.max_gen_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DecoderError::BadConfig(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::corpus::UNK_ID as usize {
            return Err(DecoderError::BadConfig(
                "vocab_size must cover the four special ids".to_string(),
            ));
        }
        if self.head == HeadKind::Mos && self.mos_components == 0 {
            return Err(DecoderError::BadConfig(
                "mos_components must be positive".to_string(),
            ));
        }
        Ok(())
    }

    /// Width of the recurrent input at layer 0.
    pub fn input_dim(&self) -> usize {
        match self.conditioning {
            Conditioning::Concat => self.word_dim + self.cond_dim,
            Conditioning::InitState => self.word_dim,
        }
    }
}

/// Output of greedy generation. `terminated` is true when the end token was
/// emitted before the length cap.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub input: Option<TokenSequence>,
    pub output: TokenSequence,
    pub terminated: bool,
}
