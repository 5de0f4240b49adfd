//! Bidirectional transformer encoder trained by masked trajectory modeling.
//!
//! Post-norm BERT layout: summed token, position and segment embeddings,
//! then per layer multi-head self-attention and a GELU feed-forward block,
//! each followed by a residual connection and layer normalization. The
//! masked-token head reuses the token embedding matrix. Gradients are
//! derived by hand; the same code runs in `f32` for training and in `f64`
//! for finite-difference checks.

pub mod checkpoint;
pub mod encoder;
pub mod heads;
pub mod linalg;
pub mod optim;
pub mod params;
pub mod train;

pub use checkpoint::{load_encoder, Checkpoint, CheckpointHeader};
pub use encoder::{encode, encode_backward, Batch, EncoderCache};
pub use heads::{forward, mtm_loss};
pub use optim::{lr_at, AdamWConfig};
pub use params::{ClassifierHead, ModelConfig, ParameterSet, Tensor};
pub use train::{
    mtm_gradients, perplexity, pretrain, train_step, EpochRecord, MtmBatch, PretrainConfig, StepReport, TrainState,
};
