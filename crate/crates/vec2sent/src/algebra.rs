//! Vector arithmetic on sentence embeddings, decoded back into text.
//!
//! Interpolations and analogy offsets generally land on points no sentence
//! maps to; the decoder accepts any finite vector of the right width.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{DecoderError, GenerationResult, TrainedDecoder};
use crate::encoders::SentenceEmbedding;

#[derive(Debug, Error)]
pub enum AlgebraError {
    #[error("embeddings have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("embeddings come from different encoders ({0:?} vs {1:?})")]
    EncoderMismatch(String, String),
    #[error("alpha {0} is outside [0, 1]; pass extrapolate=true to allow it")]
    AlphaOutOfRange(f64),
    #[error("vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Decode(#[from] DecoderError),
}

fn check_compatible(a: &SentenceEmbedding, b: &SentenceEmbedding) -> Result<(), AlgebraError> {
    if a.dim() != b.dim() {
        return Err(AlgebraError::DimensionMismatch(a.dim(), b.dim()));
    }
    if a.encoder_id != b.encoder_id {
        return Err(AlgebraError::EncoderMismatch(
            a.encoder_id.clone(),
            b.encoder_id.clone(),
        ));
    }
    Ok(())
}

/// Affine combination `alpha * x + (1 - alpha) * y`.
///
/// The endpoints return bitwise copies of the inputs, and the computation is
/// normalized so that `interpolate(x, y, a) == interpolate(y, x, 1 - a)`
/// holds exactly. Alphas outside [0, 1] need `extrapolate`.
pub fn interpolate(
    x: &SentenceEmbedding,
    y: &SentenceEmbedding,
    alpha: f64,
    extrapolate: bool,
) -> Result<SentenceEmbedding, AlgebraError> {
    check_compatible(x, y)?;
    if !alpha.is_finite() {
        return Err(AlgebraError::NonFinite(0));
    }
    if !extrapolate && !(0.0..=1.0).contains(&alpha) {
        return Err(AlgebraError::AlphaOutOfRange(alpha));
    }
    if alpha == 1.0 {
        return Ok(x.clone());
    }
    if alpha == 0.0 {
        return Ok(y.clone());
    }
    // Put the larger coefficient on the first operand: the swapped call then
    // runs the identical float computation.
    if alpha < 0.5 {
        return interpolate(y, x, 1.0 - alpha, extrapolate);
    }
    let beta = 1.0 - alpha;
    let values = x
        .values
        .iter()
        .zip(&y.values)
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    Ok(SentenceEmbedding {
        values,
        encoder_id: x.encoder_id.clone(),
        source_line: None,
    })
}

/// Offset vector `r - s + v`, elementwise.
pub fn analogy(
    r: &SentenceEmbedding,
    s: &SentenceEmbedding,
    v: &SentenceEmbedding,
) -> Result<SentenceEmbedding, AlgebraError> {
    check_compatible(r, s)?;
    check_compatible(r, v)?;
    let values = r
        .values
        .iter()
        .zip(&s.values)
        .zip(&v.values)
        .map(|((a, b), c)| a - b + c)
        .collect();
    Ok(SentenceEmbedding {
        values,
        encoder_id: r.encoder_id.clone(),
        source_line: None,
    })
}

/// Decodes an arbitrary vector through the trained decoder. The vector does
/// not have to be the encoding of any sentence; only finiteness and width
/// are checked.
pub fn decode_vector(
    decoder: &TrainedDecoder,
    values: &[f64],
) -> Result<GenerationResult, AlgebraError> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(AlgebraError::NonFinite(i));
    }
    Ok(decoder.generate(values)?)
}

/// Three query sentences and their embeddings for an `a : b :: z : c` probe;
/// decoding `r - s + v` produces the missing sentence.
#[derive(Debug, Clone)]
pub struct AnalogyQuery {
    pub a_text: String,
    pub b_text: String,
    pub c_text: String,
    pub r: SentenceEmbedding,
    pub s: SentenceEmbedding,
    pub v: SentenceEmbedding,
}

impl AnalogyQuery {
    pub fn offset(&self) -> Result<SentenceEmbedding, AlgebraError> {
        analogy(&self.r, &self.s, &self.v)
    }
}

/// One line of an analogy batch file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalogyRecord {
    pub a: String,
    pub b: String,
    pub c: String,
}

/// One line of an analogy output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalogyOutput {
    pub a: String,
    pub b: String,
    pub c: String,
    pub z_text: String,
}
