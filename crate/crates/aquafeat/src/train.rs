//! Optimizer, end-to-end training loop, and evaluation.
//!
//! Training jointly optimizes the enhancer and the toy head under the
//! task's cross-entropy loss: degraded image → white balance → enhancer →
//! head → loss. With `freeze_enhancer` the enhancer is bypassed entirely
//! (degraded image straight to the head) — the baseline arm of the
//! directional experiment.
//!
//! Determinism: identical (seed, config, dataset) produce bitwise
//! identical checkpoints and logs. Batch samples run in parallel but each
//! sample's forward/backward is self-contained and gradients reduce in
//! sample order.

use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::color::white_balance_to_median;
use crate::head::{argmax, logits_rows};

use crate::metrics::{precision_recall_f1, ConfusionMatrix, MetricsError, MetricsReport};
use crate::model::{Model, ModelConfig};
use crate::params::Param;
use crate::synth::{load_split, DataError, LoadedSample};
use crate::tensor::{Element, Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite gradient at step {step}; aborting")]
    NonFiniteGradient { step: u64 },
    #[error("invalid train config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Baseline mode: bypass the enhancer, train the head alone.
    pub freeze_enhancer: bool,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 12,
            seed: 0,
            freeze_enhancer: false,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("lr {} must be positive", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::Config(format!("{name} {b} outside [0,1)")));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment buffers, one pair per parameter, in canonical order.
#[derive(Clone, Debug)]
pub struct AdamState<E: Element> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    pub t: u64,
}

impl<E: Element> AdamState<E> {
    pub fn for_params(params: &[&Param<E>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![E::ZERO; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update: θ ← θ − lr · m̂ / √(v̂ + eps).
/// Rejects non-finite gradients without touching the parameters.
pub fn adam_step<E: Element>(
    params: &mut [&mut Param<E>],
    grads: &[Vec<E>],
    state: &mut AdamState<E>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len());
    for g in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient { step: state.t + 1 });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one = E::ONE;
    let bc1 = E::from_f64(1.0 / (1.0 - cfg.beta1.powi(t)));
    let bc2 = E::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = E::from_f64(cfg.lr);
    let eps = E::from_f64(cfg.eps);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for (j, theta) in p.value.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let m_hat = m[j] * bc1;
            let v_hat = v[j] * bc2;
            *theta -= lr * m_hat / (v_hat + eps).sqrt();
        }
    }
    Ok(())
}

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fisher–Yates with a splitmix-derived stream; identical across runs.
fn shuffled_indices(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, epoch));
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Forward one sample to logits on a fresh tape; returns the loss value
/// and, when `with_grads`, the gradient of every model parameter.
fn sample_pass(
    model: &Model<f32>,
    sample: &LoadedSample,
    bypass: bool,
    with_grads: bool,
) -> Result<(f64, usize, Vec<Vec<f32>>), TrainError> {
    let mut tape: Tape<f32> = Tape::new();
    let mut order = Vec::new();
    let vars = model.bind(&mut tape, &mut order);
    let slope = model.config.leaky_slope;

    let logits = if bypass {
        let input = tape.leaf(sample.degraded.to_tensor(), false);
        vars.head.forward(&mut tape, input, slope)?
    } else {
        let corrected = white_balance_to_median(&sample.degraded);
        let input = tape.leaf(corrected.to_tensor(), false);
        let enhanced = vars.enhancer.forward(&mut tape, input, &model.config)?;
        vars.head.forward(&mut tape, enhanced, slope)?
    };
    let loss = tape.cross_entropy(logits, &[sample.label])?;
    let loss_value = tape.value(loss).scalar().expect("scalar loss").to_f64();
    let predicted = argmax(&logits_rows(tape.value(logits))[0]);

    let grads = if with_grads {
        tape.backward(loss)?;
        order.iter().map(|v| tape.grad(*v)).collect()
    } else {
        Vec::new()
    };
    Ok((loss_value, predicted, grads))
}

/// Tab-separated training log; step rows carry the batch loss, epoch rows
/// carry the epoch mean plus validation metrics.
pub const LOG_HEADER: &str = "kind\tepoch\tstep\ttrain_loss\tval_loss\tval_accuracy";

pub struct TrainOutcome {
    pub model: Model<f32>,
    /// TSV log with a header row.
    pub log: String,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub final_val_accuracy: f64,
}

/// Joint training of enhancer + head (or head alone in baseline mode) on
/// the dataset under `data_root`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data_root: &Path,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let train_set = load_split(data_root, "train")?;
    let val_set = load_split(data_root, "val")?;

    let mut model: Model<f32> = Model::init(*model_cfg, cfg.seed)?;
    let mut state = AdamState::for_params(&model.params());
    let mut log = String::from(LOG_HEADER);
    log.push('\n');

    let mut initial_train_loss = f64::NAN;
    let mut final_train_loss = f64::NAN;
    let mut final_val_accuracy = 0.0;

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train_set.len(), cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        let mut steps = 0u64;

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, usize, Vec<Vec<f32>>)> = batch
                .par_iter()
                .map(|&i| sample_pass(&model, &train_set[i], cfg.freeze_enhancer, true))
                .collect::<Result<_, _>>()?;

            let batch_loss =
                results.iter().map(|(l, _, _)| *l).sum::<f64>() / results.len() as f64;

            // ordered reduction over the batch, then mean
            let mut grads: Vec<Vec<f32>> = model
                .params()
                .iter()
                .map(|p| vec![0.0f32; p.numel()])
                .collect();
            for (_, _, sample_grads) in &results {
                for (acc, g) in grads.iter_mut().zip(sample_grads) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += *v;
                    }
                }
            }
            let inv_b = 1.0f32 / results.len() as f32;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= inv_b;
                }
            }

            clip_global_norm(&mut grads, cfg.grad_clip);
            adam_step(&mut model.params_mut(), &grads, &mut state, cfg)?;

            epoch_loss += batch_loss;
            steps += 1;
            log.push_str(&format!(
                "step\t{}\t{}\t{:.6}\t\t\n",
                epoch + 1,
                step + 1,
                batch_loss
            ));
        }

        let epoch_train_loss = epoch_loss / steps as f64;
        if epoch == 0 {
            initial_train_loss = epoch_train_loss;
        }
        final_train_loss = epoch_train_loss;

        let (val_loss, val_accuracy) = validate(&model, &val_set, cfg.freeze_enhancer)?;
        final_val_accuracy = val_accuracy;
        log.push_str(&format!(
            "epoch\t{}\t\t{:.6}\t{:.6}\t{:.6}\n",
            epoch + 1,
            epoch_train_loss,
            val_loss,
            val_accuracy
        ));
    }

    model.enhancer_bypassed = cfg.freeze_enhancer;
    Ok(TrainOutcome {
        model,
        log,
        initial_train_loss,
        final_train_loss,
        final_val_accuracy,
    })
}

fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g {
            sq += (*v as f64) * (*v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

fn validate(
    model: &Model<f32>,
    samples: &[LoadedSample],
    bypass: bool,
) -> Result<(f64, f64), TrainError> {
    let results: Vec<(f64, usize, Vec<Vec<f32>>)> = samples
        .par_iter()
        .map(|s| sample_pass(model, s, bypass, false))
        .collect::<Result<_, _>>()?;
    let loss = results.iter().map(|(l, _, _)| *l).sum::<f64>() / results.len() as f64;
    let correct = results
        .iter()
        .zip(samples)
        .filter(|((_, p, _), s)| *p == s.label)
        .count();
    Ok((loss, correct as f64 / samples.len() as f64))
}

/// Run the model over one split and report classification metrics. Honors
/// the checkpoint's bypass flag.
pub fn evaluate(
    model: &Model<f32>,
    data_root: &Path,
    split: &str,
) -> Result<MetricsReport, TrainError> {
    let samples = load_split(data_root, split)?;
    let predictions: Vec<usize> = samples
        .par_iter()
        .map(|s| sample_pass(model, s, model.enhancer_bypassed, false).map(|(_, p, _)| p))
        .collect::<Result<_, _>>()?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (s, &p) in samples.iter().zip(&predictions) {
        cm.record(s.label, p)?;
    }
    Ok(precision_recall_f1(&cm)?)
}
