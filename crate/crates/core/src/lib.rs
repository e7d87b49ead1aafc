//! Multi-style image captioning with a fused two-branch top-down attention
//! decoder.
//!
//! The model reads precomputed visual features (a mean-pooled vector and a
//! grid of spatial vectors) and five dense captions per image, and generates
//! a caption in a requested style. Everything numeric runs on a small
//! tape-based autodiff engine in double precision.
//!
//! Module map:
//! - [`autodiff`], [`tensor`], [`gradcheck`]: tensors, reverse-mode AD, gradient checks
//! - [`corpus`]: tokenizer, vocabularies, dataset and feature files, batching
//! - [`style`]: style and word embeddings
//! - [`encoders`]: LSTM cell, dense-caption encoder, visual encoder
//! - [`decoder`], [`model`]: attention branches, fusion, the full model
//! - [`trainer`]: loss, Adam, schedule, training loop, checkpoints
//! - [`inference`]: penalized beam search and greedy decoding
//! - [`metrics`]: BLEU, ROUGE-L, CIDEr, unique words
//! - [`toy`]: synthetic multi-style corpus generator

pub mod autodiff;
pub mod corpus;
pub mod decoder;
pub mod encoders;
mod error;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod style;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Ablation, ExampleInput, Model, ModelConfig, ModelDims};
pub use params::{ParamGroup, ParamStore};
pub use tensor::Tensor;
