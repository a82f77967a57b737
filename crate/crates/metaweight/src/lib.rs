//! A desk-scale laboratory for meta-learned per-token loss scaling.
//!
//! Small autoregressive language models are adapted online on a stream of
//! documents, one weighted gradient step per document. The per-token weights
//! come from either heuristic baselines (uniform, TF-IDF, salient spans) or a
//! weighting model meta-trained so that a single weighted step on a document
//! maximally improves a proxy model's ability to answer questions about it.
//!
//! Module map:
//! - [`autograd`]: tensors, tape, higher-order backward, SGD/Adam, checkpoints
//! - [`lm`]: vocabulary, tokenizer, transformer, NLL losses, greedy decoding
//! - [`weighting`]: all per-token weighters and weight statistics
//! - [`meta`]: the bi-level trainer for the weighting model
//! - [`stream`]: online test-time adaptation and its analyses
//! - [`data`]: synthetic fact streams, splits, JSONL ingestion
//! - [`metrics`]: token-overlap F1, exact match, sweeps, transfer matrices
//! - [`config`] / [`pipeline`]: run configuration and stage orchestration

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod lm;
pub mod meta;
pub mod metrics;
pub mod pipeline;
pub mod stream;
pub mod weighting;

pub use error::{Error, Result};
