use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::Real;
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

/// Encoder architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    #[serde(default = "default_segments")]
    pub n_segments: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
}

fn default_segments() -> usize {
    2
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads, feed-forward 512, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_len: 128,
            n_segments: 2,
            dropout: 0.1,
            layernorm_eps: 1e-12,
        }
    }

    /// BERT-base dimensions.
    pub fn bert_base(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_len: 512,
            n_segments: 2,
            dropout: 0.1,
            layernorm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_segments != 2 {
            return Err(Error::Config("n_segments must be 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("dropout must lie in [0, 1) and layernorm_eps be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Normal(0, std) truncated at two standard deviations.
    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::c(v);
                }
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::c(v.f64())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.ln1_gain, &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.wq, &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv,
            &mut self.wo, &mut self.bo, &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w1,
            &mut self.b1, &mut self.w2, &mut self.b2, &mut self.ln2_gain, &mut self.ln2_bias,
        ]
    }
}

const LAYER_NAMES: [&str; 16] = [
    "attention.query.weight",
    "attention.query.bias",
    "attention.key.weight",
    "attention.key.bias",
    "attention.value.weight",
    "attention.value.bias",
    "attention.output.weight",
    "attention.output.bias",
    "attention_norm.gain",
    "attention_norm.bias",
    "ffn.up.weight",
    "ffn.up.bias",
    "ffn.down.weight",
    "ffn.down.bias",
    "ffn_norm.gain",
    "ffn_norm.bias",
];

/// Encoder weights. The masked-token output projection is tied to the
/// token embedding, so only its bias is stored separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub config: ModelConfig,
    pub token_emb: Tensor<T>,
    pub position_emb: Tensor<T>,
    pub segment_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub mtm_bias: Tensor<T>,
}

impl<T: Real> ParameterSet<T> {
    fn build(config: &ModelConfig, mut weight: impl FnMut(&[usize]) -> Tensor<T>) -> Self {
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let zeros = |s: &[usize]| Tensor::zeros(s);
        let ones = |s: &[usize]| Tensor::filled(s, T::one());
        let token_emb = weight(&[v, d]);
        let position_emb = weight(&[config.max_len, d]);
        let segment_emb = weight(&[config.n_segments, d]);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: weight(&[d, d]),
                bq: zeros(&[d]),
                wk: weight(&[d, d]),
                bk: zeros(&[d]),
                wv: weight(&[d, d]),
                bv: zeros(&[d]),
                wo: weight(&[d, d]),
                bo: zeros(&[d]),
                ln1_gain: ones(&[d]),
                ln1_bias: zeros(&[d]),
                w1: weight(&[d, f]),
                b1: zeros(&[f]),
                w2: weight(&[f, d]),
                b2: zeros(&[d]),
                ln2_gain: ones(&[d]),
                ln2_bias: zeros(&[d]),
            })
            .collect();
        Self {
            config: config.clone(),
            token_emb,
            position_emb,
            segment_emb,
            layers,
            mtm_bias: zeros(&[v]),
        }
    }

    /// Truncated-normal weights (std 0.02), zero biases, unit norm gains.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self::build(config, |s| Tensor::truncated_normal(s, INIT_STD, rng)))
    }

    /// Same shapes as `config`, every entry zero (gradient / moment buffers).
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut z = Self::build(config, |s| Tensor::zeros(s));
        for l in &mut z.layers {
            l.ln1_gain.data.fill(T::zero());
            l.ln2_gain.data.fill(T::zero());
        }
        z
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Parameter names, in the order of [`Self::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "embeddings.token.weight".to_owned(),
            "embeddings.position.weight".to_owned(),
            "embeddings.segment.weight".to_owned(),
        ];
        for i in 0..self.layers.len() {
            names.extend(LAYER_NAMES.iter().map(|n| format!("layers.{i}.{n}")));
        }
        names.push("mtm.bias".to_owned());
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut t = vec![&self.token_emb, &self.position_emb, &self.segment_emb];
        for l in &self.layers {
            t.extend(l.tensors());
        }
        t.push(&self.mtm_bias);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut t = vec![&mut self.token_emb, &mut self.position_emb, &mut self.segment_emb];
        for l in &mut self.layers {
            t.extend(l.tensors_mut());
        }
        t.push(&mut self.mtm_bias);
        t
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            token_emb: self.token_emb.cast(),
            position_emb: self.position_emb.cast(),
            segment_emb: self.segment_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                })
                .collect(),
            mtm_bias: self.mtm_bias.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Whether decoupled weight decay applies to a parameter: matrices and
/// embeddings yes, biases and normalization parameters no.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

/// Linear classifier over the first-position (`[CLS]`) encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ClassifierHead<T> {
    pub fn init(d_model: usize, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::input("a classifier needs at least two classes"));
        }
        Ok(Self {
            weight: Tensor::truncated_normal(&[d_model, n_classes], INIT_STD, rng),
            bias: Tensor::zeros(&[n_classes]),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.bias.data.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(&self.weight.shape),
            bias: Tensor::zeros(&self.bias.shape),
        }
    }

    pub fn names(&self) -> [&'static str; 2] {
        ["classifier.weight", "classifier.bias"]
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::desk(500);
        let a: ParameterSet<f32> = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b: ParameterSet<f32> = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c: ParameterSet<f32> = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().all(|l| l.ln1_gain.data.iter().chain(&l.ln2_gain.data).all(|&g| g == 1.0)));
        assert_eq!(a.names().len(), a.tensors().len());
    }

    #[test]
    fn embedding_std_near_two_hundredths() {
        let cfg = ModelConfig::desk(200); // 25_600 draws
        let p: ParameterSet<f64> = ParameterSet::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = &p.token_emb.data;
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt();
        assert!((0.015..=0.025).contains(&sd), "sd {sd}");
        assert!(x.iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::desk(100);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(100);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::bert_base(30_000).validate().is_ok());
    }

    #[test]
    fn decay_selection() {
        assert!(decays("layers.0.ffn.up.weight"));
        assert!(decays("embeddings.token.weight"));
        assert!(!decays("layers.0.ffn.up.bias"));
        assert!(!decays("layers.0.ffn_norm.gain"));
        assert!(!decays("mtm.bias"));
    }
}
