//! Mini-batch training: padded batches, mean NLL, global-norm clipping,
//! Adam, and best-on-validation model selection.
//!
//! Within a batch every sample gets its own tape, so forward and backward
//! passes run in parallel. Per-sample gradients are then summed in sample
//! order, which keeps parallel and sequential runs bit-identical.

mod batch;
mod checkpoint;
mod config;
mod optim;

pub use batch::{check_trainable, make_batches, Batch};
pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_vocab, save_checkpoint, Checkpoint, ARRAYS_FILE, MANIFEST_FILE, VOCAB_FILE,
};
pub use config::{TrainConfig, PRESETS};
pub use optim::{adam_step, clip_gradients, global_norm, nll_loss, AdamState};

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ErrorClass, Result};
use crate::eval::accuracy;
use crate::exec::Execution;
use crate::reader::{record_sample, ModelParams};
use crate::tensor::{Tape, Tensor};
use crate::vocab::EncodedSample;

const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a run seed with stream coordinates into an independent seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6a09_e667_f3bc_c908, |h, &p| splitmix64(h ^ p))
}

/// Result of one optimisation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Mean loss and summed gradients (in [`ModelParams::tensor_names`] order)
/// of a batch, with per-sample dropout seeds drawn from `dropout_seed`.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &Batch,
    dropout_seed: Option<u64>,
    exec: Execution,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let inputs = batch.inputs();
    let weight = 1.0 / n as f64;
    let per_sample = exec.map(&inputs, |i, input| -> Result<_> {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape, true);
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(derive_seed(&[s, i as u64])));
        let graph = record_sample(&mut tape, &vars, &params.config, params.config.mode, *input, rng.as_mut())?;
        let answer = batch.answer_ids[i];
        let k = graph.word_index(answer).ok_or_else(|| {
            Error::Usage(format!("answer id {answer} is not a document word of batch row {i}"))
        })?;
        let p = tape.index(graph.word_probs, k)?;
        let log_p = tape.ln(p)?;
        let loss = -tape.scalar(log_p);
        let grads = tape.backward(log_p, &Tensor::vector(vec![-weight])?)?;
        let bufs: Vec<_> = vars.all().into_iter().map(|v| grads.buf(v).cloned()).collect();
        Ok((loss, bufs))
    });

    let mut total = vec![Vec::new(); params.tensors().len()];
    for (t, g) in params.tensors().iter().zip(total.iter_mut()) {
        *g = vec![0.0; t.numel()];
    }
    let mut loss = 0.0;
    for r in per_sample {
        let (l, bufs) = r?;
        loss += l;
        for (buf, acc) in bufs.iter().zip(total.iter_mut()) {
            if let Some(b) = buf {
                b.add_to(acc);
            }
        }
    }
    Ok((loss * weight, total))
}

/// Forward, backward, clip and Adam update on one batch.
pub fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    batch: &Batch,
    clip_threshold: f64,
    dropout_seed: Option<u64>,
    exec: Execution,
) -> Result<StepStats> {
    let (loss, mut grads) = batch_gradients(params, batch, dropout_seed, exec)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    let grad_norm = clip_gradients(&mut grads, &ModelParams::tensor_names(), clip_threshold)?;
    adam_step(&mut params.tensors_mut(), &grads, adam)?;
    Ok(StepStats { loss, grad_norm })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub valid_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_accuracy: Option<f64>,
    /// Seconds spent on the epoch. Not reproducible, unlike everything else.
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the initial parameters
    /// if no epoch completed.
    pub params: ModelParams,
    pub adam: AdamState,
    pub best_epoch: Option<usize>,
    pub log: Vec<EpochLog>,
    /// Why training stopped early on divergence.
    pub aborted: Option<String>,
}

/// Trains from scratch. After every epoch the model is evaluated on
/// `valid` with dropout off; the best epoch is kept, ties going to the
/// earlier one. A non-finite loss or gradient stops training and returns
/// the best parameters seen so far with `aborted` set.
pub fn train(
    config: &TrainConfig,
    vocab_size: usize,
    train_set: &[EncodedSample],
    valid_set: &[EncodedSample],
    exec: Execution,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Usage("training needs non-empty training and validation sets".into()));
    }
    check_trainable(train_set)?;

    let model_config = config.model_config(vocab_size);
    let mut params = ModelParams::init(model_config, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, STREAM_INIT])))?;
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = AdamState::new(&sizes, config.lr, config.beta1, config.beta2, config.epsilon);

    let mut best: Option<(usize, f64, ModelParams, AdamState)> = None;
    let mut log = Vec::new();
    let mut aborted = None;

    'epochs: for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, STREAM_SHUFFLE, epoch as u64]));
        let batches = make_batches(train_set, config.batch_size, &mut rng)?;
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let dropout_seed = (config.dropout_rate > 0.0)
                .then(|| derive_seed(&[config.seed, STREAM_DROPOUT, epoch as u64, b as u64]));
            match train_step(&mut params, &mut adam, batch, config.clip_threshold, dropout_seed, exec) {
                Ok(s) => loss_sum += s.loss * batch.len() as f64,
                Err(e) if e.class() == ErrorClass::Numeric => {
                    aborted = Some(format!("diverged in epoch {epoch}, batch {b}: {e}"));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let valid_accuracy = match accuracy(&params, valid_set, config.mode, exec) {
            Ok(a) => a,
            Err(e) if e.class() == ErrorClass::Numeric => {
                aborted = Some(format!("diverged in epoch {epoch}: validation failed: {e}"));
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        let train_accuracy = if config.log_train_accuracy {
            Some(accuracy(&params, train_set, config.mode, exec)?)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / train_set.len() as f64,
            valid_accuracy,
            train_accuracy,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        if best.as_ref().is_none_or(|(_, acc, _, _)| valid_accuracy > *acc) {
            best = Some((epoch, valid_accuracy, params.clone(), adam.clone()));
        }
        if let (Some(p), Some((best_epoch, ..))) = (config.patience, &best) {
            if epoch - best_epoch >= p {
                break;
            }
        }
    }

    let (best_epoch, params, adam) = match best {
        Some((e, _, p, a)) => (Some(e), p, a),
        None => (None, params, adam),
    };
    Ok(TrainOutcome {
        params,
        adam,
        best_epoch,
        log,
        aborted,
    })
}
