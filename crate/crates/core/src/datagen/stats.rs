use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::{ClozeSample, PLACEHOLDER};

/// Corpus statistics in the shape of a dataset summary table. Averages are
/// rounded to the nearest integer, halves up.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub queries: usize,
    pub max_doc_tokens: usize,
    pub max_query_tokens: usize,
    pub avg_doc_tokens: usize,
    pub avg_query_tokens: usize,
    /// Distinct document and query tokens, the placeholder excluded.
    pub vocabulary: usize,
}

fn rounded_mean(total: usize, n: usize) -> usize {
    (2 * total + n) / (2 * n)
}

pub fn dataset_stats(samples: &[ClozeSample]) -> Result<DatasetStats> {
    if samples.is_empty() {
        return Err(Error::Usage("statistics need at least one sample".into()));
    }
    let n = samples.len();
    let doc_total: usize = samples.iter().map(|s| s.document.len()).sum();
    let query_total: usize = samples.iter().map(|s| s.query.len()).sum();
    let vocab: HashSet<&str> = samples
        .iter()
        .flat_map(|s| s.document.iter().chain(&s.query))
        .map(String::as_str)
        .filter(|t| *t != PLACEHOLDER)
        .collect();
    Ok(DatasetStats {
        queries: n,
        max_doc_tokens: samples.iter().map(|s| s.document.len()).max().unwrap_or(0),
        max_query_tokens: samples.iter().map(|s| s.query.len()).max().unwrap_or(0),
        avg_doc_tokens: rounded_mean(doc_total, n),
        avg_query_tokens: rounded_mean(query_total, n),
        vocabulary: vocab.len(),
    })
}
