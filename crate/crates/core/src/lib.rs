//! Consensus Attention Sum Reader for cloze-style reading comprehension.
//!
//! The crate covers the whole pipeline: generating ⟨document, query, answer⟩
//! triples from tagged text ([`datagen`]), building a shortlisted vocabulary
//! ([`vocab`]), the bi-GRU encoder ([`nn`]) and attention head ([`reader`])
//! on top of a small reverse-mode autodiff engine ([`tensor`]), training
//! ([`train`]) and evaluation ([`eval`]).
//!
//! Per-sample work inside a batch is data-parallel through [`exec`]; with the
//! default `parallel` feature disabled everything runs sequentially and
//! produces bit-identical results.

pub mod commands;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod exec;
pub mod nn;
pub mod reader;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, ErrorClass, Result};
pub use reader::{MergeMode, ModelParams, ReaderMode};
pub use sample::{ClozeSample, PLACEHOLDER};
pub use tensor::{Tape, Tensor, Var};
pub use vocab::Vocabulary;
