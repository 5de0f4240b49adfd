use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate_f1;
use super::ClassExample;
use crate::error::{Error, Result};
use crate::model::encoder::{encode, encode_backward, Batch};
use crate::model::heads::{argmax_rows, cls_backward, cls_forward};
use crate::model::linalg::log_sum_exp;
use crate::model::optim::{adamw_update, clip_global_norm, lr_at, AdamWConfig, Slot};
use crate::model::params::{decays, ClassifierHead, ParameterSet};
use crate::seed::derive_seed;
use crate::subhash::PAD_ID;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub adam: AdamWConfig,
    /// Fraction of each class held out for validation.
    pub val_frac: f64,
    /// Train the classifier head only.
    pub freeze_encoder: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 5e-5,
            warmup_frac: 0.05,
            clip_norm: 1.0,
            adam: AdamWConfig::default(),
            val_frac: 0.2,
            freeze_encoder: false,
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tune epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(0.0 < self.val_frac && self.val_frac < 1.0)
        {
            return Err(Error::Config("fine-tune lr must be positive, warmup_frac in [0, 1), val_frac in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        n_train.div_ceil(self.batch_size)
    }
}

/// Per-class seeded split; each class sends `round(val_frac * count)`
/// examples to validation. Both parts keep the input order.
pub fn balanced_split(examples: Vec<ClassExample>, val_frac: f64, seed: u64) -> (Vec<ClassExample>, Vec<ClassExample>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_class.entry(e.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; examples.len()];
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        let k = (val_frac * idx.len() as f64).round() as usize;
        idx[..k].iter().for_each(|&i| is_val[i] = true);
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (e, v) in examples.into_iter().zip(is_val) {
        if v {
            val.push(e)
        } else {
            train.push(e)
        }
    }
    (train, val)
}

fn make_batch(examples: &[&ClassExample]) -> Result<Batch> {
    let len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(0);
    let n = examples.len();
    let mut ids = vec![PAD_ID; n * len];
    let mut segments = vec![0u8; n * len];
    let mut attention = vec![0u8; n * len];
    for (b, e) in examples.iter().enumerate() {
        let o = b * len;
        ids[o..o + e.ids.len()].copy_from_slice(&e.ids);
        segments[o..o + e.ids.len()].copy_from_slice(&e.segments);
        attention[o..o + e.ids.len()].iter_mut().for_each(|a| *a = 1);
    }
    Batch::new(n, len, ids, segments, attention)
}

/// Predicted classes and mean cross-entropy, without dropout.
pub fn predict(
    encoder: &ParameterSet<f32>,
    head: &ClassifierHead<f32>,
    examples: &[ClassExample],
    batch_size: usize,
) -> Result<(Vec<usize>, f64)> {
    let (d, c) = (encoder.config.d_model, head.n_classes());
    let mut preds = Vec::with_capacity(examples.len());
    let mut loss = 0.0;
    for group in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&ClassExample> = group.iter().collect();
        let b = make_batch(&refs)?;
        let cache = encode(encoder, &b, None)?;
        let out = cls_forward(head, &cache.output, b.n, b.len, d, None, 0.0);
        for (row, e) in out.logits.chunks(c).zip(group) {
            if e.label >= c {
                return Err(Error::input(format!("class {} outside {c} classes", e.label)));
            }
            loss += log_sum_exp(row) - row[e.label] as f64;
        }
        preds.extend(argmax_rows(&out.logits, c));
    }
    Ok((preds, loss / examples.len().max(1) as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub encoder: ParameterSet<f32>,
    pub head: ClassifierHead<f32>,
    pub epochs: Vec<EpochMetrics>,
    pub steps: u64,
}

impl FineTuneResult {
    /// Validation macro F1 after the last epoch.
    pub fn val_f1(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_f1)
    }
}

pub const FINETUNE_METRICS_HEADER: &str = "epoch,task,split,loss,f1";

/// Full fine-tuning of encoder and head with cross-entropy on the `[CLS]`
/// output. Batch order and dropout masks depend only on `seed`, so two
/// runs that differ in initial weights see identical batches.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune(
    mut encoder: ParameterSet<f32>,
    mut head: ClassifierHead<f32>,
    train: &[ClassExample],
    val: &[ClassExample],
    config: &FineTuneConfig,
    seed: u64,
    task: &str,
    metrics: Option<&mut dyn Write>,
) -> Result<FineTuneResult> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::input("fine-tuning needs non-empty train and validation sets"));
    }
    let mut metrics = metrics;
    let io = |e| Error::io("fine-tune metrics", e);
    let d = encoder.config.d_model;
    let dropout = encoder.config.dropout;
    let names = encoder.names();
    let (mut m, mut v) = (encoder.zeros_like(), encoder.zeros_like());
    let (mut hm, mut hv) = (head.zeros_like(), head.zeros_like());
    let steps_per_epoch = config.steps_per_epoch(train.len()) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, (1 << 40) + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let refs: Vec<&ClassExample> = idx.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = refs.iter().map(|e| e.label).collect();
            let b = make_batch(&refs)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step));
            let cache = encode(&encoder, &b, Some(&mut rng))?;
            let out = cls_forward(&head, &cache.output, b.n, b.len, d, Some(&mut rng), dropout);
            let mut hg = head.zeros_like();
            let (loss, d_hidden) = cls_backward(&head, &out, &targets, b.len, d, &mut hg)?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("{task}: non-finite fine-tuning loss {loss}"),
                });
            }
            let mut g = encoder.zeros_like();
            if !config.freeze_encoder {
                encode_backward(&encoder, &b, &cache, d_hidden, &mut g);
            }
            let norm = {
                let mut all = g.tensors_mut();
                all.extend(hg.tensors_mut());
                clip_global_norm(&mut all, config.clip_norm)
            };
            if !norm.is_finite() {
                return Err(Error::Training {
                    step,
                    msg: format!("{task}: non-finite gradient norm"),
                });
            }
            step += 1;
            let lr = lr_at(step - 1, total, config.warmup_frac, config.lr);
            let mut slots: Vec<Slot<'_, f32>> = Vec::new();
            if !config.freeze_encoder {
                for ((((param, grad), mm), vv), name) in encoder
                    .tensors_mut()
                    .into_iter()
                    .zip(g.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                    .zip(&names)
                {
                    slots.push(Slot {
                        param,
                        grad,
                        m: mm,
                        v: vv,
                        decay: decays(name),
                    });
                }
            }
            let head_decay = [true, false];
            for ((((param, grad), mm), vv), decay) in head
                .tensors_mut()
                .into_iter()
                .zip(hg.tensors())
                .zip(hm.tensors_mut())
                .zip(hv.tensors_mut())
                .zip(head_decay)
            {
                slots.push(Slot {
                    param,
                    grad,
                    m: mm,
                    v: vv,
                    decay,
                });
            }
            adamw_update(slots, lr, step, &config.adam);
            loss_sum += loss;
        }
        let train_loss = loss_sum / steps_per_epoch as f64;
        let (preds, val_loss) = predict(&encoder, &head, val, config.batch_size)?;
        let labels: Vec<usize> = val.iter().map(|e| e.label).collect();
        let val_f1 = evaluate_f1(&preds, &labels)?;
        log::info!("{task} epoch {epoch}: train loss {train_loss:.4}, validation F1 {val_f1:.4}");
        if let Some(w) = metrics.as_deref_mut() {
            writeln!(w, "{epoch},{task},train,{train_loss:.6},").map_err(io)?;
            writeln!(w, "{epoch},{task},validation,{val_loss:.6},{val_f1:.6}").map_err(io)?;
        }
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_f1,
        });
    }
    Ok(FineTuneResult {
        encoder,
        head,
        epochs: history,
        steps: step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub task: String,
    pub random_f1: f64,
    pub pretrained_f1: f64,
    pub gap: f64,
}

/// Fine-tunes a randomly initialized and a pre-trained encoder on the same
/// data, batch order, dropout masks and head initialization.
#[allow(clippy::too_many_arguments)]
pub fn compare_inits(
    task: &str,
    pretrained: &ParameterSet<f32>,
    train: &[ClassExample],
    val: &[ClassExample],
    n_classes: usize,
    config: &FineTuneConfig,
    seed: u64,
    mut metrics: Option<&mut dyn Write>,
) -> Result<CompareReport> {
    let cfg = &pretrained.config;
    let random = ParameterSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)))?;
    let head = ClassifierHead::init(cfg.d_model, n_classes, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 2)))?;
    let random_f1 = fine_tune(
        random,
        head.clone(),
        train,
        val,
        config,
        seed,
        &format!("{task}/random"),
        metrics.as_mut().map(|w| &mut **w as &mut dyn Write),
    )?
    .val_f1();
    let pretrained_f1 = fine_tune(
        pretrained.clone(),
        head,
        train,
        val,
        config,
        seed,
        &format!("{task}/pretrained"),
        metrics.as_mut().map(|w| &mut **w as &mut dyn Write),
    )?
    .val_f1();
    Ok(CompareReport {
        task: task.to_owned(),
        random_f1,
        pretrained_f1,
        gap: pretrained_f1 - random_f1,
    })
}
