//! Turn dense sentence embeddings back into text.
//!
//! A frozen sentence encoder maps a token sequence to a fixed-size vector;
//! this crate trains a conditional LSTM language model to invert that map,
//! scores the reconstructions (exact match, permutation match, BLEU, and an
//! injected soft scorer), rank-correlates the per-encoder scores against
//! external task score tables, and decodes vector arithmetic (interpolations,
//! analogies) back into sentences.
//!
//! Modules follow the pipeline:
//!
//! * [`corpus`] loads sentences, tokenizes, and builds vocabularies
//! * [`encoders`] pools token embeddings or adapts precomputed vectors
//! * [`decoder`] trains and runs the conditional language model
//! * [`diagnostics`] scores (input, reconstruction) pairs
//! * [`analysis`] ranks encoders and correlates score tables
//! * [`algebra`] interpolates and composes embeddings, decoding the result
//! * [`cli`] wires it all into the `v2s` binary

pub mod algebra;
pub mod analysis;
pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod diagnostics;
pub mod encoders;
pub mod fixtures;
