#![allow(dead_code)]

use ltm_core::masking::IGNORE_LABEL;
use ltm_core::model::{mtm_gradients, Batch, ModelConfig, MtmBatch, ParameterSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 1,
        d_ff: 16,
        max_len: 6,
        n_segments: 2,
        dropout: 0.0,
        layernorm_eps: 1e-12,
    }
}

/// Two length-6 sequences, the second with two pad positions, three
/// labeled positions each.
pub fn tiny_batch() -> MtmBatch {
    let ids = vec![2, 5, 4, 7, 4, 9, 2, 6, 4, 8, 0, 0];
    let segments = vec![0, 0, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0];
    let attention = vec![1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
    let mut labels = vec![IGNORE_LABEL; 12];
    labels[2] = 6;
    labels[4] = 10;
    labels[1] = 5;
    labels[8] = 3;
    labels[7] = 9;
    labels[9] = 8;
    MtmBatch {
        batch: Batch::new(2, 6, ids, segments, attention).unwrap(),
        labels,
    }
}

pub struct GradCheck {
    pub family: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Central differences (step `h`) against the analytic gradient on `samples`
/// coordinates per parameter tensor, in double precision. Coordinates are
/// drawn with replacement when a tensor has fewer entries than `samples`.
pub fn gradient_check(p: &ParameterSet<f64>, b: &MtmBatch, samples: usize, h: f64, seed: u64) -> Vec<GradCheck> {
    let (_, g) = mtm_gradients(p, b, None).unwrap();
    let loss = |q: &ParameterSet<f64>| mtm_gradients(q, b, None).unwrap().0;
    let names = p.names();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let size = p.tensors()[k].data.len();
        let mut max_rel_err: f64 = 0.0;
        for _ in 0..samples {
            let i = rng.gen_range(0..size);
            let mut q = p.clone();
            q.tensors_mut()[k].data[i] += h;
            let up = loss(&q);
            q.tensors_mut()[k].data[i] -= 2.0 * h;
            let down = loss(&q);
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.tensors()[k].data[i];
            let scale = numeric.abs().max(analytic.abs()).max(1e-6);
            max_rel_err = max_rel_err.max((numeric - analytic).abs() / scale);
        }
        out.push(GradCheck {
            family: name.clone(),
            checked: samples,
            max_rel_err,
        });
    }
    out
}

pub fn tiny_params(seed: u64) -> ParameterSet<f64> {
    let p: ParameterSet<f32> = ParameterSet::init(&tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut p = p.cast::<f64>();
    // Larger weights than the 0.02 init make every path contribute visibly.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xff);
    for t in p.tensors_mut() {
        t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
    p
}

/// A pipeline configuration small enough to run every stage in seconds.
pub fn tiny_run_config() -> ltm_core::run::RunConfig {
    let mut cfg = ltm_core::run::RunConfig::default();
    cfg.seed = 5;
    cfg.synth.n_users = 80;
    cfg.synth.months = 4;
    // a small box so destinations recur often enough to become classes
    cfg.synth.bbox.lat_max = 35.62;
    cfg.synth.bbox.lon_max = 139.62;
    cfg.tokenizer.vocab_size = 300;
    cfg.masking.chunk_size = 64;
    cfg.model.d_model = 16;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.d_ff = 32;
    cfg.model.max_len = 64;
    cfg.pretrain.epochs = 1;
    cfg.pretrain.batch_size = 16;
    cfg.finetune.epochs = 1;
    cfg.finetune.batch_size = 16;
    cfg.tasks.n_examples = 40;
    cfg
}
