//! A desk-scale toolkit for machine learning on source code.
//!
//! The crate covers the full pipeline:
//!
//! - [`corpus`] — ingest CodeSearchNet-format JSONL corpora, filter by
//!   language, and produce deterministic train/valid/test splits.
//! - [`tokenizers`] — the two codecs the models consume: a character
//!   vocabulary (1-of-k) and a byte-level BPE model.
//! - [`numeric`] — a dense-tensor core with reverse-mode automatic
//!   differentiation, gradient clipping, and a binary checkpoint format.
//! - [`models`] — NBoW and bidirectional-GRU sequence encoders, a
//!   character-level recurrent LM, and a decoder-only transformer LM.
//! - [`training`] — deterministic mini-batch training loops, LR schedules,
//!   and a hyperparameter sweep harness.
//! - [`retrieval`] — in-batch softmax loss over query/code score matrices,
//!   MRR, and brute-force snippet search.
//! - [`evalgen`] — autoregressive sampling plus corpus BLEU, perplexity,
//!   and n-gram novelty metrics.
//!
//! Everything is CPU-only, 32-bit float by default, and bit-reproducible
//! under a fixed seed in single-threaded mode.

pub mod corpus;
pub mod error;
pub mod evalgen;
pub mod models;
pub mod numeric;
pub mod retrieval;
pub mod training;
pub mod tokenizers;

pub use error::{Error, Result};
