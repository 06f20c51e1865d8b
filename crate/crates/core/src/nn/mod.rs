//! Neural building blocks: embedding lookup, GRU cells, the bi-directional
//! GRU encoder, dropout and parameter initialisers.

mod dropout;
mod embedding;
mod gru;
mod init;

pub use dropout::{dropout, dropout_mask, record_dropout};
pub use embedding::{embed_lookup, EmbeddingMatrix};
pub use gru::{
    bigru_encode, gru_cell, record_bigru, record_gru_cell, EncodedSequence, GruParams, GruVars,
    GRU_TENSOR_NAMES,
};
pub use init::{orthogonal_init, uniform_init, EMBEDDING_INIT_BOUND};
