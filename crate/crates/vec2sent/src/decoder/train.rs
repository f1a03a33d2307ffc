//! Teacher-forced training of the decoder against a frozen encoder.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{DecoderModel, TrainExample};
use super::DecoderError;
use crate::corpus::TokenSequence;
use crate::encoders::{EncoderError, SentenceEmbedding};

/// Optimization settings. The learning-rate and clipping defaults are tuned
/// for desk-scale corpora.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// Summary stored inside checkpoints. `final_loss` is absent when no epoch
/// has run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub corpus_size: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
}

/// Adam with bias correction, applied to the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, lr: f64, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn clip_global_norm(grads: &mut [f64], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > clip {
        let scale = clip / norm;
        for g in grads {
            *g *= scale;
        }
    }
}

/// Trains the decoder to reconstruct each corpus sentence from its embedding.
///
/// `encode` is the frozen encoder: it is called once per sentence up front
/// (its index in `corpus` is passed through for line-aligned lookups) and its
/// parameters are never touched. Training is teacher-forced cross-entropy
/// over `SOS + tokens` predicting `tokens + EOS`, with gradient-norm clipping
/// and Adam. `on_epoch` receives one record per epoch plus the current model
/// and returns whether to continue; returning false stops after that epoch.
pub fn train<E>(
    model: &mut DecoderModel,
    encode: E,
    corpus: &[TokenSequence],
    hyper: &Hyperparams,
    mut on_epoch: impl FnMut(&EpochRecord, &DecoderModel) -> bool,
) -> Result<TrainingMeta, DecoderError>
where
    E: Fn(usize, &TokenSequence) -> Result<SentenceEmbedding, EncoderError>,
{
    if corpus.is_empty() {
        return Err(DecoderError::EmptyCorpus);
    }
    let cond_dim = model.config().cond_dim;
    let mut conds: Vec<Vec<f64>> = Vec::with_capacity(corpus.len());
    for (i, seq) in corpus.iter().enumerate() {
        let e = encode(i, seq)?;
        if e.values.len() != cond_dim {
            return Err(DecoderError::DimensionMismatch {
                expected: cond_dim,
                got: e.values.len(),
            });
        }
        conds.push(e.values);
    }

    let mut adam = Adam::new(model.num_params());
    let mut indices: Vec<usize> = (0..corpus.len()).collect();
    let mut final_loss = None;
    let mut epochs_run = 0;
    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let mut rng =
            ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(0x9e3779b9 * (epoch as u64 + 1)));
        indices.shuffle(&mut rng);
        let mut loss_weighted = 0.0;
        let mut tokens_total = 0usize;
        for chunk in indices.chunks(hyper.batch_size.max(1)) {
            let batch: Vec<TrainExample<'_>> = chunk
                .iter()
                .map(|&i| TrainExample {
                    ids: &corpus[i].ids,
                    cond: &conds[i],
                })
                .collect();
            let fwd = model.forward(&batch)?;
            let loss = fwd.mean_loss();
            if !loss.is_finite() {
                return Err(DecoderError::TrainingDiverged { epoch });
            }
            let tokens = fwd.token_count();
            let mut grads = {
                let mut g = vec![0.0; model.num_params()];
                let mut store = model_grads_scratch(model);
                model.backward(&batch, &fwd, &mut store);
                g.copy_from_slice(store.flat());
                g
            };
            clip_global_norm(&mut grads, hyper.clip_norm);
            adam.step(hyper.learning_rate, model_params_mut(model), &grads);
            loss_weighted += loss * tokens as f64;
            tokens_total += tokens;
        }
        let mean_loss = loss_weighted / tokens_total.max(1) as f64;
        final_loss = Some(mean_loss);
        epochs_run = epoch + 1;
        let keep_going = on_epoch(
            &EpochRecord {
                epoch,
                mean_loss,
                wall_seconds: started.elapsed().as_secs_f64(),
            },
            model,
        );
        if !keep_going {
            break;
        }
    }
    Ok(TrainingMeta {
        corpus_size: corpus.len(),
        epochs: epochs_run,
        final_loss,
    })
}

// Narrow internal accessors keeping ParamStore out of the public surface.
fn model_grads_scratch(model: &DecoderModel) -> super::params::ParamStore {
    model.grads_scratch()
}

fn model_params_mut(model: &mut DecoderModel) -> &mut [f64] {
    model.params_flat_mut()
}
