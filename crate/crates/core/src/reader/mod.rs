//! The consensus attention sum reader and the single-attention baseline.
//!
//! For a document of `n` tokens and a query of `m` tokens, every query
//! position `t` induces an attention distribution over the document,
//! `α(t) = softmax(h_doc · h_query(t))`. The `m` rows are merged into one
//! distribution `s` by a [`MergeMode`] followed by another softmax, and
//! `s` is summed per distinct word to give `P(w | D, Q)`.

mod attention;
mod model;

pub use attention::{
    as_reader_attention, attention_per_step, attention_sum, merge_attention, record_as_attention,
    record_attention_per_step, record_merge,
};
pub use model::{
    forward, forward_sample, predict, predict_from, record_sample, ModelConfig, ModelParams, ModelVars,
    SampleGraph, SampleInput,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Heuristic combining the per-query-step attentions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Sum,
    Avg,
    Max,
}

/// Which attention head produces the document distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReaderMode {
    Sum,
    Avg,
    Max,
    /// Single attention from the concatenated final query states.
    AsBaseline,
}

impl ReaderMode {
    pub fn merge(self) -> Option<MergeMode> {
        match self {
            ReaderMode::Sum => Some(MergeMode::Sum),
            ReaderMode::Avg => Some(MergeMode::Avg),
            ReaderMode::Max => Some(MergeMode::Max),
            ReaderMode::AsBaseline => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReaderMode::Sum => "sum",
            ReaderMode::Avg => "avg",
            ReaderMode::Max => "max",
            ReaderMode::AsBaseline => "as-baseline",
        }
    }
}

impl From<MergeMode> for ReaderMode {
    fn from(m: MergeMode) -> Self {
        match m {
            MergeMode::Sum => ReaderMode::Sum,
            MergeMode::Avg => ReaderMode::Avg,
            MergeMode::Max => ReaderMode::Max,
        }
    }
}

impl fmt::Display for ReaderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReaderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(ReaderMode::Sum),
            "avg" => Ok(ReaderMode::Avg),
            "max" => Ok(ReaderMode::Max),
            "as-baseline" => Ok(ReaderMode::AsBaseline),
            other => Err(Error::Usage(format!(
                "unknown mode {other:?} (expected sum, avg, max or as-baseline)"
            ))),
        }
    }
}

/// Attention produced for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    /// Per-query-step attention `[m × n]`; absent for the baseline head.
    pub alpha: Option<Vec<Vec<f64>>>,
    /// Final attention over document positions.
    pub merged: Vec<f64>,
    /// Word-level probabilities keyed by token id.
    pub word_probs: BTreeMap<u32, f64>,
}

impl AttentionMap {
    pub fn alpha_tensor(&self) -> Option<Tensor> {
        self.alpha.as_ref().and_then(|rows| Tensor::from_rows(rows).ok())
    }

    /// Checks the distribution invariants against the document the map was
    /// computed for. Rows and `merged` must sum to one within `1e-12`,
    /// `word_probs` within `1e-10`; masked positions must be exactly zero
    /// and every key must occur at an unmasked document position.
    pub fn validate(&self, doc_ids: &[u32], doc_mask: &[bool]) -> Result<()> {
        let bad = |message: String| Error::Validation { line: 0, message };
        let n = doc_ids.len();
        if doc_mask.len() != n || self.merged.len() != n {
            return Err(bad(format!(
                "length mismatch: doc {n}, mask {}, merged {}",
                doc_mask.len(),
                self.merged.len()
            )));
        }
        let check_row = |what: &str, row: &[f64]| -> Result<()> {
            if row.len() != n {
                return Err(bad(format!("{what} has {} entries, expected {n}", row.len())));
            }
            let mut total = 0.0;
            for (p, &m) in row.iter().zip(doc_mask) {
                if !p.is_finite() || *p < 0.0 {
                    return Err(bad(format!("{what} has invalid entry {p}")));
                }
                if !m && *p != 0.0 {
                    return Err(bad(format!("{what} puts mass {p} on a masked position")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(bad(format!("{what} sums to {total}")));
            }
            Ok(())
        };
        if let Some(alpha) = &self.alpha {
            for (t, row) in alpha.iter().enumerate() {
                check_row(&format!("alpha row {t}"), row)?;
            }
        }
        check_row("merged", &self.merged)?;
        let total: f64 = self.word_probs.values().sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(bad(format!("word_probs sum to {total}")));
        }
        for key in self.word_probs.keys() {
            if !doc_ids.iter().zip(doc_mask).any(|(id, &m)| m && id == key) {
                return Err(bad(format!("word {key} does not occur in the document")));
            }
        }
        Ok(())
    }
}
