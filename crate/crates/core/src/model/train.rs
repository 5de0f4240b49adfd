//! Masked trajectory modeling: gradients, optimizer steps, perplexity and
//! the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{push_params, Checkpoint, CheckpointHeader};
use super::encoder::{encode, encode_backward, Batch};
use super::heads::{mtm_backward, mtm_forward};
use super::linalg::Real;
use super::optim::{adamw_update, clip_global_norm, lr_at, AdamWConfig, Slot};
use super::params::{decays, ModelConfig, ParameterSet};
use crate::error::{Error, Result};
use crate::masking::MaskedChunk;
use crate::seed::derive_seed;

/// Encoder batch plus per-position labels (`IGNORE_LABEL` where unlabeled).
#[derive(Debug, Clone, PartialEq)]
pub struct MtmBatch {
    pub batch: Batch,
    pub labels: Vec<i32>,
}

impl MtmBatch {
    pub fn from_chunks(chunks: &[&MaskedChunk]) -> Result<Self> {
        let segs: Vec<Vec<u8>> = chunks.iter().map(|c| vec![0u8; c.len()]).collect();
        let batch = Batch::from_rows(
            chunks
                .iter()
                .zip(&segs)
                .map(|(c, s)| (c.input_ids.as_slice(), s.as_slice(), c.attention_mask.as_slice())),
        )?;
        let labels = chunks.iter().flat_map(|c| c.labels[..batch.len].iter().copied()).collect();
        Ok(Self { batch, labels })
    }
}

/// Mean masked-token loss and its gradient for one batch. Dropout is
/// applied iff `rng` is given.
pub fn mtm_gradients<T: Real>(
    p: &ParameterSet<T>,
    b: &MtmBatch,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, ParameterSet<T>)> {
    let cache = encode(p, &b.batch, rng)?;
    let out = mtm_forward(p, &cache.output, &b.labels)?;
    let mut g = p.zeros_like();
    let scale = T::c(1.0 / out.count as f64);
    let d_hidden = mtm_backward(p, &cache.output, &out, scale, &mut g);
    encode_backward(p, &b.batch, &cache, d_hidden, &mut g);
    Ok((out.mean_loss(), g))
}

/// Parameters, optimizer moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet<f32>,
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
    pub step: u64,
    pub seed: u64,
    pub adam: AdamWConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
}

impl TrainState {
    pub fn new(params: ParameterSet<f32>, seed: u64, adam: AdamWConfig) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            step: 0,
            seed,
            adam,
        }
    }

    pub fn init(config: &ModelConfig, seed: u64, adam: AdamWConfig) -> Result<Self> {
        let params = ParameterSet::init(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self::new(params, seed, adam))
    }

    /// Dropout stream of the current step, so that a resumed run repeats
    /// the same masks.
    pub fn step_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.step))
    }

    /// Clips `g` and applies one AdamW update.
    pub fn apply(&mut self, g: &mut ParameterSet<f32>, lr: f64, clip_norm: f64) -> Result<f64> {
        let norm = clip_global_norm(&mut g.tensors_mut(), clip_norm);
        if !norm.is_finite() {
            return Err(Error::Training {
                step: self.step,
                msg: format!("non-finite gradient norm {norm}"),
            });
        }
        self.step += 1;
        let names = self.params.names();
        let slots = self
            .params
            .tensors_mut()
            .into_iter()
            .zip(g.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
            .zip(&names)
            .map(|(((param, grad), (m, v)), name)| Slot {
                param,
                grad,
                m,
                v,
                decay: decays(name),
            })
            .collect();
        adamw_update(slots, lr, self.step, &self.adam);
        Ok(norm)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut arrays = Vec::new();
        push_params(&mut arrays, "", &self.params);
        push_params(&mut arrays, "adam.m.", &self.m);
        push_params(&mut arrays, "adam.v.", &self.v);
        Checkpoint {
            header: CheckpointHeader {
                config: self.params.config.clone(),
                step: self.step,
                seed: self.seed,
                adam: Some(self.adam),
                meta: Default::default(),
            },
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let adam = ck
            .header
            .adam
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no optimizer state".into()))?;
        Ok(Self {
            params: ck.params("")?,
            m: ck.params("adam.m.")?,
            v: ck.params("adam.v.")?,
            step: ck.header.step,
            seed: ck.header.seed,
            adam,
        })
    }
}

/// One optimizer step on a masked batch, with dropout.
pub fn train_step(state: &mut TrainState, b: &MtmBatch, lr: f64, clip_norm: f64) -> Result<StepReport> {
    let mut rng = state.step_rng();
    let (loss, mut g) = mtm_gradients(&state.params, b, Some(&mut rng))?;
    if !loss.is_finite() {
        return Err(Error::Training {
            step: state.step,
            msg: format!("non-finite loss {loss} at lr {lr}"),
        });
    }
    let grad_norm = state.apply(&mut g, lr, clip_norm)?;
    Ok(StepReport { loss, grad_norm })
}

/// Total masked cross-entropy and labeled count over a dataset.
pub fn masked_nll<T: Real>(p: &ParameterSet<T>, chunks: &[MaskedChunk], batch_size: usize) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut count = 0;
    for group in chunks.chunks(batch_size.max(1)) {
        let refs: Vec<&MaskedChunk> = group.iter().collect();
        let b = MtmBatch::from_chunks(&refs)?;
        let cache = encode(p, &b.batch, None)?;
        let out = mtm_forward(p, &cache.output, &b.labels)?;
        total += out.loss_sum;
        count += out.count;
    }
    Ok((total, count))
}

/// `exp(total masked cross-entropy / masked positions)`.
pub fn perplexity<T: Real>(p: &ParameterSet<T>, chunks: &[MaskedChunk], batch_size: usize) -> Result<f64> {
    if chunks.is_empty() {
        return Err(Error::input("perplexity of an empty dataset"));
    }
    let (total, count) = masked_nll(p, chunks, batch_size)?;
    Ok((total / count as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub adam: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 1e-4,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            adam: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(self.clip_norm >= 0.0) {
            return Err(Error::Config("lr must be positive, warmup_frac in [0, 1), clip_norm >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    /// Mean training loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub val_perplexity: f64,
}

pub const METRICS_HEADER: &str = "step,epoch,split,loss,perplexity";

pub fn write_metric_row(w: &mut impl Write, step: u64, epoch: usize, split: &str, loss: f64) -> std::io::Result<()> {
    writeln!(w, "{step},{epoch},{split},{loss:.6},{:.6}", loss.exp())
}

/// Trains for `config.epochs` epochs, evaluating validation perplexity
/// before training (epoch 0) and after every epoch. `on_epoch` receives
/// the state and record after each evaluation, e.g. to save checkpoints.
pub fn pretrain<W, F>(
    state: &mut TrainState,
    train: &[MaskedChunk],
    val: &[MaskedChunk],
    config: &PretrainConfig,
    metrics: &mut W,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    W: Write,
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::input("pretraining needs non-empty train and validation sets"));
    }
    let io = |e| Error::io("metrics", e);
    writeln!(metrics, "{METRICS_HEADER}").map_err(io)?;
    let steps_per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let start_step = state.step;

    let eval = |state: &TrainState, epoch: usize, train_loss: Option<f64>| -> Result<EpochRecord> {
        let (nll, count) = masked_nll(&state.params, val, config.batch_size)?;
        let val_loss = nll / count as f64;
        Ok(EpochRecord {
            epoch,
            step: state.step,
            train_loss,
            val_loss,
            val_perplexity: val_loss.exp(),
        })
    };

    let mut records = vec![eval(state, 0, None)?];
    write_metric_row(metrics, state.step, 0, "validation", records[0].val_loss).map_err(io)?;
    on_epoch(state, &records[0])?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(state.seed, (1 << 40) + epoch as u64));
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&MaskedChunk> = idx.iter().map(|&i| &train[i]).collect();
            let b = MtmBatch::from_chunks(&refs)?;
            let lr = lr_at(state.step - start_step, total, config.warmup_frac, config.lr);
            let r = train_step(state, &b, lr, config.clip_norm)?;
            sum += r.loss;
            log::debug!("step {} loss {:.4} grad-norm {:.3}", state.step, r.loss, r.grad_norm);
        }
        let train_loss = sum / steps_per_epoch as f64;
        write_metric_row(metrics, state.step, epoch, "train", train_loss).map_err(io)?;
        let rec = eval(state, epoch, Some(train_loss))?;
        write_metric_row(metrics, state.step, epoch, "validation", rec.val_loss).map_err(io)?;
        log::info!(
            "epoch {epoch}: train loss {train_loss:.4}, validation perplexity {:.3}",
            rec.val_perplexity
        );
        on_epoch(state, &rec)?;
        records.push(rec);
    }
    metrics.flush().map_err(io)?;
    Ok(records)
}
