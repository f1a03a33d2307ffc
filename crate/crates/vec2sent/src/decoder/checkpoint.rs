//! Checkpoint container and the generation-ready decoder handle.
//!
//! A checkpoint is self-describing: a JSON header (config, vocabulary digest,
//! encoder id, training summary) followed by the flat parameter vector as
//! little-endian f64, which round-trips bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::DecoderModel;
use super::train::TrainingMeta;
use super::{DecoderConfig, DecoderError, GenerationResult};
use crate::corpus::{TokenSequence, Vocabulary, EOS_ID, PAD_ID, SOS_ID, UNK_TOKEN};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"V2SCKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: DecoderConfig,
    vocab_hash: String,
    encoder_id: String,
    training_meta: TrainingMeta,
    param_count: u64,
}

/// Serialized decoder weights plus everything needed to refuse mismatched
/// vocabularies and encoders at load time.
#[derive(Debug, Clone)]
pub struct DecoderCheckpoint {
    pub config: DecoderConfig,
    pub vocab_hash: String,
    pub encoder_id: String,
    pub training_meta: TrainingMeta,
    params: Vec<f64>,
}

impl DecoderCheckpoint {
    pub fn from_model(
        model: &DecoderModel,
        vocab: &Vocabulary,
        encoder_id: impl Into<String>,
        training_meta: TrainingMeta,
    ) -> Self {
        Self {
            config: model.config().clone(),
            vocab_hash: vocab.digest(),
            encoder_id: encoder_id.into(),
            training_meta,
            params: model.params_flat().to_vec(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DecoderError> {
        let path = path.as_ref();
        let header = Header {
            config: self.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            encoder_id: self.encoder_id.clone(),
            training_meta: self.training_meta,
            param_count: self.params.len() as u64,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut bytes =
            Vec::with_capacity(16 + header_json.len() + self.params.len() * 8);
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&header_json);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        fs::write(path, bytes).map_err(|source| DecoderError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DecoderError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| DecoderError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |reason: &str| DecoderError::BadCheckpoint {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(bad("missing magic prefix"));
        }
        let rest = &bytes[CHECKPOINT_MAGIC.len()..];
        if rest.len() < 4 {
            return Err(bad("truncated header length"));
        }
        let header_len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
        let rest = &rest[4..];
        if rest.len() < header_len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&rest[..header_len])
            .map_err(|e| bad(&format!("bad header JSON: {e}")))?;
        let payload = &rest[header_len..];
        let expected = header.param_count as usize * 8;
        if payload.len() != expected {
            return Err(bad(&format!(
                "weight payload is {} bytes, expected {expected}",
                payload.len()
            )));
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            config: header.config,
            vocab_hash: header.vocab_hash,
            encoder_id: header.encoder_id,
            training_meta: header.training_meta,
            params,
        })
    }

    /// Binds a vocabulary to the checkpoint, refusing one whose digest
    /// differs from the digest recorded at training time.
    pub fn into_trained(self, vocab: Vocabulary) -> Result<TrainedDecoder, DecoderError> {
        let got = vocab.digest();
        if got != self.vocab_hash {
            return Err(DecoderError::VocabDigestMismatch {
                expected: self.vocab_hash,
                got,
            });
        }
        let mut model = DecoderModel::new(self.config, 0)?;
        model.set_params_flat(&self.params)?;
        TrainedDecoder::new(model, vocab, self.encoder_id, self.training_meta)
    }
}

/// An immutable decoder ready for generation: model weights bound to the
/// vocabulary they were trained with.
#[derive(Debug, Clone)]
pub struct TrainedDecoder {
    model: DecoderModel,
    vocab: Vocabulary,
    encoder_id: String,
    training_meta: TrainingMeta,
}

impl TrainedDecoder {
    pub fn new(
        model: DecoderModel,
        vocab: Vocabulary,
        encoder_id: impl Into<String>,
        training_meta: TrainingMeta,
    ) -> Result<Self, DecoderError> {
        if vocab.len() != model.config().vocab_size {
            return Err(DecoderError::VocabSizeMismatch {
                expected: model.config().vocab_size,
                got: vocab.len(),
            });
        }
        Ok(Self {
            model,
            vocab,
            encoder_id: encoder_id.into(),
            training_meta,
        })
    }

    pub fn model(&self) -> &DecoderModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn training_meta(&self) -> &TrainingMeta {
        &self.training_meta
    }

    pub fn config(&self) -> &DecoderConfig {
        self.model.config()
    }

    pub fn checkpoint(&self) -> DecoderCheckpoint {
        DecoderCheckpoint::from_model(
            &self.model,
            &self.vocab,
            self.encoder_id.clone(),
            self.training_meta,
        )
    }

    /// Greedy decoding from a conditioning vector: start at SOS, repeatedly
    /// take the argmax token, stop at EOS or the length cap. PAD and SOS are
    /// never emitted. Deterministic given the checkpoint and vector.
    pub fn generate(&self, cond: &[f64]) -> Result<GenerationResult, DecoderError> {
        let mut state = self.model.start_state(cond)?;
        let mut prev = SOS_ID;
        let mut tokens = Vec::new();
        let mut ids = Vec::new();
        let mut terminated = false;
        for _ in 0..self.model.config().max_gen_len {
            let (dist, next_state) = self.model.step(prev, &state, cond)?;
            state = next_state;
            let mut best = EOS_ID;
            let mut best_p = f64::NEG_INFINITY;
            for (id, &p) in dist.iter().enumerate() {
                let id = id as u32;
                if id == PAD_ID || id == SOS_ID {
                    continue;
                }
                if p > best_p {
                    best_p = p;
                    best = id;
                }
            }
            if best == EOS_ID {
                terminated = true;
                break;
            }
            ids.push(best);
            tokens.push(
                self.vocab
                    .token_of(best)
                    .unwrap_or(UNK_TOKEN)
                    .to_string(),
            );
            prev = best;
        }
        Ok(GenerationResult {
            input: None,
            output: TokenSequence::new(tokens, ids)?,
            terminated,
        })
    }
}
