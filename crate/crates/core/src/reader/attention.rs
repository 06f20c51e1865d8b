use std::collections::BTreeMap;

use super::MergeMode;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Row `t` of the result is the masked softmax over document positions of
/// the dot products `⟨h_doc[j], h_query[t]⟩`. No scaling is applied.
pub fn record_attention_per_step(tape: &mut Tape<'_>, h_doc: Var, h_query: Var, doc_mask: &[bool]) -> Result<Var> {
    if tape.shape(h_doc).len() != 2 || tape.shape(h_doc)[1] != tape.shape(h_query)[1] {
        return Err(Error::dim("attention_per_step", tape.shape(h_doc), tape.shape(h_query)));
    }
    let logits = tape.matmul_nt(h_query, h_doc)?;
    tape.masked_softmax(logits, doc_mask)
}

/// Consensus merge of the `m` attention rows followed by a softmax:
/// `softmax(Σ α(t))`, `softmax(Σ α(t) / m)` or `softmax(max_t α(t))`.
pub fn record_merge(tape: &mut Tape<'_>, alpha: Var, mode: MergeMode, doc_mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(alpha).to_vec();
    let [m, n] = shape[..] else {
        return Err(Error::Usage(format!("merge needs an m×n attention matrix, got {shape:?}")));
    };
    if m == 0 {
        return Err(Error::Usage("merge needs at least one query step".into()));
    }
    let pooled = match mode {
        MergeMode::Sum => tape.sum_rows(alpha)?,
        MergeMode::Avg => {
            let total = tape.sum_rows(alpha)?;
            tape.scale(total, 1.0 / m as f64)?
        }
        MergeMode::Max => {
            let mut acc = tape.row(alpha, 0)?;
            for t in 1..m {
                let row = tape.row(alpha, t)?;
                acc = tape.maximum(acc, row)?;
            }
            tape.reshape(acc, vec![n])?
        }
    };
    tape.masked_softmax(pooled, doc_mask)
}

/// Single attention of the baseline reader: masked softmax of
/// `⟨h_doc[j], query_final⟩`, with no consensus merge.
pub fn record_as_attention(tape: &mut Tape<'_>, h_doc: Var, query_final: Var, doc_mask: &[bool]) -> Result<Var> {
    let width = tape.shape(h_doc).get(1).copied().unwrap_or(0);
    if tape.data(query_final).len() != width {
        return Err(Error::dim("as_reader_attention", tape.shape(h_doc), tape.shape(query_final)));
    }
    let q = tape.reshape(query_final, vec![1, width])?;
    let logits = tape.matmul_nt(q, h_doc)?;
    let flat = tape.reshape(logits, vec![tape.shape(h_doc)[0]])?;
    tape.masked_softmax(flat, doc_mask)
}

/// Per-query-step attention `[m × n]` for plain encoded states.
pub fn attention_per_step(h_doc: &Tensor, h_query: &Tensor, doc_mask: &[bool]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let d = tape.param(h_doc, false);
    let q = tape.param(h_query, false);
    let alpha = record_attention_per_step(&mut tape, d, q, doc_mask)?;
    Ok(tape.value(alpha))
}

pub fn merge_attention(alpha: &Tensor, mode: MergeMode, doc_mask: &[bool]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.param(alpha, false);
    let s = record_merge(&mut tape, a, mode, doc_mask)?;
    Ok(tape.data(s).to_vec())
}

pub fn as_reader_attention(h_doc: &Tensor, query_final: &[f64], doc_mask: &[bool]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let d = tape.param(h_doc, false);
    let q = tape.constant(Tensor::vector(query_final.to_vec())?);
    let s = record_as_attention(&mut tape, d, q, doc_mask)?;
    Ok(tape.data(s).to_vec())
}

/// Sums position-level attention per distinct unmasked document word,
/// strictly left to right.
pub fn attention_sum(merged: &[f64], doc_ids: &[u32], doc_mask: &[bool]) -> Result<BTreeMap<u32, f64>> {
    if merged.len() != doc_ids.len() || doc_mask.len() != doc_ids.len() {
        return Err(Error::dim("attention_sum", &[merged.len()], &[doc_ids.len(), doc_mask.len()]));
    }
    let mut probs = BTreeMap::new();
    for ((&p, &id), &m) in merged.iter().zip(doc_ids).zip(doc_mask) {
        if m {
            *probs.entry(id).or_insert(0.0) += p;
        }
    }
    Ok(probs)
}
