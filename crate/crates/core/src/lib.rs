//! Multi-grained masked language modeling, from corpus to trained checkpoint.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`vocab`]: n-gram counting, phrase-lexicon induction, and fine/coarse
//!   vocabulary construction.
//! - [`tokenizer`]: dual-granularity tokenization with an explicit
//!   fine↔coarse alignment (every coarse token covers a contiguous run of
//!   fine tokens).
//! - [`tensor`], [`ops`], [`optim`]: a small dense numeric kernel with
//!   hand-derived backward passes for every operation the model uses, plus
//!   Adam with linear warmup/decay.
//! - [`params`], [`model`]: the dual-encoder transformer in three variants —
//!   shared layer parameters (`ambert`), fully independent encoders
//!   (`combo`), and a single encoder over the concatenated streams
//!   (`hybrid`).
//! - [`pretrain`], [`finetune`], [`inference`]: span-consistent masking and
//!   the MLM objective, regularized multi-head fine-tuning, and
//!   single-encoder inference with dev-set encoder selection.
//! - [`analysis`]: attention-map extraction, [CLS] distance statistics, and
//!   coarse-token rate measurement.
//! - [`check`]: independent verification oracles (finite differences,
//!   brute-force enumerations) used by the test suites.
//!
//! The crate is `no_std` (with `alloc`); all IO, file formats, and the CLI
//! live in the companion `ambert-cli` crate. Numeric code is generic over
//! [`tensor::Real`] so the same forward/backward paths run in 32-bit storage
//! for training and in 64-bit for gradient verification.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod analysis;
pub mod check;
pub mod finetune;
pub mod inference;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod vocab;

pub use model::{ForwardOutput, Model, ModelConfig, Variant};
pub use tensor::{Real, Tensor};
pub use tokenizer::{Mode, TokenSeqPair, Tokenizer};
pub use vocab::{Granularity, LexiconCriteria, NGramTable, Vocabulary};
