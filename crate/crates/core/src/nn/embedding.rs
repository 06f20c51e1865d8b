use rand::Rng;

use super::init::{uniform_init, EMBEDDING_INIT_BOUND};
use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// Word embedding matrix `[vocab_size × embed_dim]`, shared by the
/// document and query encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub weights: Tensor,
}

impl EmbeddingMatrix {
    /// Uniform initialisation in `[-0.1, 0.1]`.
    pub fn init<R: Rng + ?Sized>(vocab_size: usize, embed_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(EmbeddingMatrix {
            weights: uniform_init(vocab_size, embed_dim, EMBEDDING_INIT_BOUND, rng)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

/// Rows `ids` of the embedding matrix, `[ids.len() × embed_dim]`.
pub fn embed_lookup(ids: &[u32], emb: &EmbeddingMatrix) -> Result<Tensor> {
    let mut tape = Tape::new();
    let table = tape.param(&emb.weights, false);
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let rows = tape.gather_rows(table, &ids)?;
    Ok(tape.value(rows))
}
