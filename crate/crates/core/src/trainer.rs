//! Deterministic training loop: Adam with linear warmup, global-norm
//! gradient clipping, loss logging, and resumable checkpoints.
//!
//! (seed, data, config) fully determines the loss log. Batch order is a pure
//! function of the seed and the epoch index, so resuming from a checkpoint
//! replays the exact batch schedule the uninterrupted run would have seen.
//! A non-finite loss aborts with the step and batch index rather than
//! skipping the batch; silent skips hide bugs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, Batch, DataError, TrainingExample};
use crate::model::{CheckpointError, ModelError, TranslationModel};
use crate::model::{read_checkpoint, write_checkpoint, RawCheckpoint, RawOptimizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {step} (batch index {batch_index})")]
    NonFiniteLoss { step: u64, batch_index: usize },
    #[error("checkpoint has no optimizer state; it is a model-only file")]
    MissingOptimizer,
    #[error("checkpoint parameter set does not match the model")]
    ParamMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub batch_size: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(1.0),
            batch_size: 8,
            max_steps: 100,
            warmup_steps: 100,
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.learning_rate > 0.0) {
            errs.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                errs.push(format!("{name} {b} outside [0, 1)"));
            }
        }
        if self.max_steps == 0 {
            errs.push("max_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be at least 1".into());
        }
        errs
    }
}

// ── optimizer ────────────────────────────────────────────────────────

/// Adam first/second moments plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(model: &TranslationModel) -> Self {
        let zero = |_: &str, t: &crate::tensor::Tensor| vec![0.0; t.numel()];
        OptimizerState {
            step: 0,
            m: model
                .params()
                .iter()
                .map(|(n, t)| (n.clone(), zero(n, t)))
                .collect(),
            v: model
                .params()
                .iter()
                .map(|(n, t)| (n.clone(), zero(n, t)))
                .collect(),
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update at `step` (1-based), with linear warmup to
/// the configured learning rate.
pub fn adam_step(
    params: &mut BTreeMap<String, crate::tensor::Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    tc: &TrainConfig,
    step: u64,
) {
    let warm = if tc.warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / tc.warmup_steps as f64).min(1.0)
    };
    let lr = tc.learning_rate * warm;
    let (b1, b2) = (tc.adam_beta1, tc.adam_beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for (name, t) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("moment buffer");
        let v = state.v.get_mut(name).expect("moment buffer");
        let data = t.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + tc.adam_eps);
        }
    }
    state.step = step;
}

// ── loss log ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossEntry {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

/// Step-indexed loss curve; steps are strictly increasing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub entries: Vec<LossEntry>,
}

impl LossLog {
    fn push(&mut self, e: LossEntry) {
        if let Some(last) = self.entries.last() {
            assert!(e.step > last.step, "loss log steps must increase");
        }
        self.entries.push(e);
    }

    /// `step,train_loss,val_loss,seconds` with an empty val_loss cell when
    /// absent. `with_seconds == false` leaves the seconds cell empty too, so
    /// two identical runs produce byte-identical files.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from("step,train_loss,val_loss,seconds\n");
        for e in &self.entries {
            let val = e.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
            let secs = if with_seconds {
                format!("{:.3}", e.seconds)
            } else {
                String::new()
            };
            out.push_str(&format!("{},{:.6},{},{}\n", e.step, e.train_loss, val, secs));
        }
        out
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.entries.last().map(|e| e.train_loss)
    }

    pub fn min_train_loss(&self) -> Option<f64> {
        self.entries
            .iter()
            .map(|e| e.train_loss)
            .min_by(|a, b| a.partial_cmp(b).unwrap())
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub loss_log: LossLog,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

// ── loss computation ─────────────────────────────────────────────────

/// Per-row losses on one tape, combined token-weighted so the batch loss is
/// total NLL over all supervised positions divided by their count.
fn batch_loss_var(
    model: &TranslationModel,
    tape: &mut crate::tensor::Tape,
    bound: &crate::model::ParamBinding,
    batch: &Batch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<Option<(crate::tensor::Var, f64)>, TrainError> {
    let mut parts: Vec<(crate::tensor::Var, f64)> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let mut drop = dropout;
    match batch {
        Batch::DecoderOnly {
            tokens,
            valid,
            loss_mask,
        } => {
            for (row, ((toks, val), lmask)) in
                tokens.iter().zip(valid).zip(loss_mask).enumerate()
            {
                let _ = row;
                if toks.len() < 2 {
                    continue;
                }
                let inputs = &toks[..toks.len() - 1];
                let key_valid = &val[..toks.len() - 1];
                let targets: Vec<i64> = (1..toks.len())
                    .map(|j| {
                        if lmask[j] && val[j] {
                            toks[j] as i64
                        } else {
                            -1
                        }
                    })
                    .collect();
                let n_active = targets.iter().filter(|&&t| t != -1).count();
                if n_active == 0 {
                    continue;
                }
                let logits = model.decoder_only_logits(
                    tape,
                    bound,
                    inputs,
                    Some(key_valid),
                    drop.as_deref_mut(),
                )?;
                let loss = tape.cross_entropy(logits, &targets, -1)?;
                parts.push((loss, 0.0));
                weights.push(n_active as f64);
            }
        }
        Batch::EncoderDecoder {
            enc,
            enc_valid,
            dec,
            dec_valid,
            labels,
        } => {
            for i in 0..enc.len() {
                let targets = &labels[i];
                let n_active = targets.iter().filter(|&&t| t != -1).count();
                if n_active == 0 {
                    continue;
                }
                let logits = model.encoder_decoder_logits(
                    tape,
                    bound,
                    &enc[i],
                    Some(&enc_valid[i]),
                    &dec[i],
                    Some(&dec_valid[i]),
                    drop.as_deref_mut(),
                )?;
                let loss = tape.cross_entropy(logits, targets, -1)?;
                parts.push((loss, 0.0));
                weights.push(n_active as f64);
            }
        }
    }
    if parts.is_empty() {
        return Ok(None);
    }
    let total: f64 = weights.iter().sum();
    for (part, w) in parts.iter_mut().zip(&weights) {
        part.1 = w / total;
    }
    let combined = tape.weighted_sum(&parts)?;
    Ok(Some((combined, total)))
}

/// Token-weighted mean loss over a set of examples, no gradients.
pub fn evaluate_loss(
    model: &TranslationModel,
    examples: &[TrainingExample],
    pad_id: u32,
) -> Result<f64, TrainError> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0.0;
    for ex in examples {
        let batch = make_batches(std::slice::from_ref(ex), 1, pad_id, 0)?;
        let mut tape = crate::tensor::Tape::new();
        let bound = model.bind(&mut tape);
        if let Some((loss, weight)) = batch_loss_var(model, &mut tape, &bound, &batch[0], None)? {
            total_nll += tape.value(loss)[0] * weight;
            total_tokens += weight;
        }
    }
    Ok(if total_tokens > 0.0 {
        total_nll / total_tokens
    } else {
        0.0
    })
}

// ── training loop ────────────────────────────────────────────────────

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `tc.max_steps` total optimizer steps (continuing from `resume` when
/// given), logging every `log_every` and checkpointing every
/// `checkpoint_every`. The final checkpoint is always written when a
/// directory is provided.
pub fn train(
    model: &mut TranslationModel,
    examples: &[TrainingExample],
    tc: &TrainConfig,
    eval_set: Option<&[TrainingExample]>,
    pad_id: u32,
    ckpt_dir: Option<&Path>,
    resume: Option<OptimizerState>,
) -> Result<TrainOutcome, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = resume.unwrap_or_else(|| OptimizerState::new(model));
    let start_step = state.step;
    let clock = Instant::now();
    let mut log = LossLog::default();
    let mut checkpoints = Vec::new();
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir)?;
    }

    let batches_per_epoch = examples.len().div_ceil(tc.batch_size) as u64;
    let mut cached_epoch = u64::MAX;
    let mut epoch_batches: Vec<Batch> = Vec::new();

    for step in start_step + 1..=tc.max_steps {
        let epoch = (step - 1) / batches_per_epoch;
        let batch_index = ((step - 1) % batches_per_epoch) as usize;
        if epoch != cached_epoch {
            epoch_batches = make_batches(examples, tc.batch_size, pad_id, mix_seed(tc.seed, epoch))?;
            cached_epoch = epoch;
        }
        let batch = &epoch_batches[batch_index];

        let mut tape = crate::tensor::Tape::new();
        let bound = model.bind(&mut tape);
        let mut dropout_rng = if model.config().dropout_rate > 0.0 {
            Some(ChaCha8Rng::seed_from_u64(mix_seed(tc.seed, 0xD0_0000 + step)))
        } else {
            None
        };
        let Some((loss_var, _)) =
            batch_loss_var(model, &mut tape, &bound, batch, dropout_rng.as_mut())?
        else {
            continue;
        };
        let loss = tape.value(loss_var)[0];
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, batch_index });
        }
        tape.backward(loss_var)?;
        let mut grads: BTreeMap<String, Vec<f64>> = bound
            .iter()
            .map(|(name, &var)| {
                let g = tape
                    .grad(var)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(var).len()]);
                (name.clone(), g)
            })
            .collect();
        if let Some(max_norm) = tc.grad_clip_norm {
            clip_global_norm(&mut grads, max_norm);
        }
        adam_step(model.params_mut(), &grads, &mut state, tc, step);

        let last = step == tc.max_steps;
        if step % tc.log_every == 0 || last {
            let val_loss = match eval_set {
                Some(es) if !es.is_empty() => Some(evaluate_loss(model, es, pad_id)?),
                _ => None,
            };
            log.push(LossEntry {
                step,
                train_loss: loss,
                val_loss,
                seconds: clock.elapsed().as_secs_f64(),
            });
        }
        if let Some(dir) = ckpt_dir {
            if tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && !last {
                let path = dir.join(format!("step_{step:06}.ckpt"));
                save_checkpoint(model, &state, &path)?;
                checkpoints.push(path);
            }
        }
    }

    let final_checkpoint = match ckpt_dir {
        Some(dir) => {
            let path = dir.join("final.ckpt");
            save_checkpoint(model, &state, &path)?;
            checkpoints.push(path.clone());
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        loss_log: log,
        checkpoints,
        final_checkpoint,
    })
}

// ── checkpointing ────────────────────────────────────────────────────

/// Model parameters plus optimizer state, with length and checksum so
/// truncation or corruption is detected on load.
pub fn save_checkpoint(
    model: &TranslationModel,
    state: &OptimizerState,
    path: &Path,
) -> Result<(), TrainError> {
    let raw = RawCheckpoint {
        config: model.config().clone(),
        params: model
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data().to_vec()))
            .collect(),
        optimizer: Some(RawOptimizer {
            step: state.step,
            moments: model
                .params()
                .keys()
                .map(|n| (state.m[n].clone(), state.v[n].clone()))
                .collect(),
        }),
    };
    std::fs::write(path, write_checkpoint(&raw)).map_err(CheckpointError::from)?;
    Ok(())
}

/// Inverse of [`save_checkpoint`]; training resumed from the result follows
/// the uninterrupted trajectory bit for bit.
pub fn load_checkpoint(path: &Path) -> Result<(TranslationModel, OptimizerState), TrainError> {
    let bytes = std::fs::read(path).map_err(CheckpointError::from)?;
    let raw = read_checkpoint(&bytes)?;
    let Some(opt) = raw.optimizer.clone() else {
        return Err(TrainError::MissingOptimizer);
    };
    let names: Vec<String> = raw.params.iter().map(|(n, _, _)| n.clone()).collect();
    let model = TranslationModel::from_raw(raw)?;
    if names.len() != opt.moments.len() {
        return Err(TrainError::ParamMismatch);
    }
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, (mm, vv)) in names.into_iter().zip(opt.moments) {
        m.insert(name.clone(), mm);
        v.insert(name, vv);
    }
    Ok((
        model,
        OptimizerState {
            step: opt.step,
            m,
            v,
        },
    ))
}
