//! Trajectory foundation model toolkit: spatial tokenization of check-in
//! trajectories, masked trajectory modeling with a compact transformer
//! encoder, and fine-tuning on downstream trajectory tasks.

pub mod error;
pub mod geocell;
pub mod masking;
pub mod model;
pub mod pipeline;
pub mod run;
pub mod seed;
pub mod subhash;
pub mod tasks;

pub use error::{Error, Result};
pub use geocell::{decode_cell, encode_cell, parent, BBox, CellId, GeoPoint};
pub use subhash::{train_vocab, TokenSequence, Vocabulary};
