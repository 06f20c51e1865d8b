use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{record_as_attention, record_attention_per_step, record_merge};
use super::{AttentionMap, ReaderMode};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::nn::{record_bigru, record_dropout, EmbeddingMatrix, GruParams, GruVars, GRU_TENSOR_NAMES};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub mode: ReaderMode,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "vocab_size, embed_dim and hidden_dim must be positive (got {}, {}, {})",
                self.vocab_size, self.embed_dim, self.hidden_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// All trainable parameters. The embedding matrix is shared by the
/// document and query paths; the four GRUs share `hidden_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: EmbeddingMatrix,
    pub doc_fwd: GruParams,
    pub doc_bwd: GruParams,
    pub query_fwd: GruParams,
    pub query_bwd: GruParams,
    pub config: ModelConfig,
}

const GRU_PREFIXES: [&str; 4] = ["doc_fwd", "doc_bwd", "query_fwd", "query_bwd"];

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (e, h) = (config.embed_dim, config.hidden_dim);
        Ok(ModelParams {
            embedding: EmbeddingMatrix::init(config.vocab_size, e, rng)?,
            doc_fwd: GruParams::init(e, h, rng)?,
            doc_bwd: GruParams::init(e, h, rng)?,
            query_fwd: GruParams::init(e, h, rng)?,
            query_bwd: GruParams::init(e, h, rng)?,
            config,
        })
    }

    /// Parameter names in the canonical order used by [`Self::tensors`],
    /// gradients and checkpoints.
    pub fn tensor_names() -> Vec<String> {
        let mut names = vec!["embedding".to_string()];
        for prefix in GRU_PREFIXES {
            names.extend(GRU_TENSOR_NAMES.iter().map(|n| format!("{prefix}.{n}")));
        }
        names
    }

    fn grus(&self) -> [&GruParams; 4] {
        [&self.doc_fwd, &self.doc_bwd, &self.query_fwd, &self.query_bwd]
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embedding.weights];
        for g in self.grus() {
            out.extend(g.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embedding.weights];
        for g in [&mut self.doc_fwd, &mut self.doc_bwd, &mut self.query_fwd, &mut self.query_bwd] {
            out.extend(g.tensors_mut());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds parameters from tensors in [`Self::tensor_names`] order,
    /// checking every shape against `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = 1 + 4 * GRU_TENSOR_NAMES.len();
        if tensors.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameter tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let embedding = it.next().expect("length checked");
        let want = [config.vocab_size, config.embed_dim];
        if embedding.shape() != want {
            return Err(Error::dim("embedding", &want, embedding.shape()));
        }
        let mut grus = Vec::with_capacity(4);
        for _ in GRU_PREFIXES {
            let parts: [Tensor; 9] = std::array::from_fn(|_| it.next().expect("length checked"));
            let g = GruParams::from_tensors(parts)?;
            if g.input_dim() != config.embed_dim || g.hidden_dim() != config.hidden_dim {
                return Err(Error::dim(
                    "gru",
                    &[config.embed_dim, config.hidden_dim],
                    &[g.input_dim(), g.hidden_dim()],
                ));
            }
            grus.push(g);
        }
        let [doc_fwd, doc_bwd, query_fwd, query_bwd]: [GruParams; 4] =
            grus.try_into().expect("four GRUs");
        Ok(ModelParams {
            embedding: EmbeddingMatrix { weights: embedding },
            doc_fwd,
            doc_bwd,
            query_fwd,
            query_bwd,
            config,
        })
    }

    pub fn record<'p>(&'p self, tape: &mut Tape<'p>, requires_grad: bool) -> ModelVars {
        ModelVars {
            embedding: tape.param(&self.embedding.weights, requires_grad),
            doc_fwd: self.doc_fwd.record(tape, requires_grad),
            doc_bwd: self.doc_bwd.record(tape, requires_grad),
            query_fwd: self.query_fwd.record(tape, requires_grad),
            query_bwd: self.query_bwd.record(tape, requires_grad),
        }
    }
}

/// Tape handles of every model parameter.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub embedding: Var,
    pub doc_fwd: GruVars,
    pub doc_bwd: GruVars,
    pub query_fwd: GruVars,
    pub query_bwd: GruVars,
}

impl ModelVars {
    /// Same order as [`ModelParams::tensor_names`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for g in [&self.doc_fwd, &self.doc_bwd, &self.query_fwd, &self.query_bwd] {
            out.extend(g.all());
        }
        out
    }
}

/// One encoded sample. Masks mark real tokens; `false` entries are padding.
#[derive(Debug, Clone, Copy)]
pub struct SampleInput<'a> {
    pub doc: &'a [u32],
    pub doc_mask: &'a [bool],
    pub query: &'a [u32],
    pub query_mask: &'a [bool],
}

impl<'a> SampleInput<'a> {
    pub fn new(doc: &'a [u32], query: &'a [u32], doc_mask: &'a [bool], query_mask: &'a [bool]) -> Self {
        SampleInput {
            doc,
            doc_mask,
            query,
            query_mask,
        }
    }
}

/// The recorded head of one sample.
#[derive(Debug, Clone)]
pub struct SampleGraph {
    /// `[m × n]` per-step attention; `None` for the baseline head.
    pub alpha: Option<Var>,
    /// `[n]` final attention over positions.
    pub merged: Var,
    /// `[words.len()]` word probabilities, entry `k` belongs to `words[k]`.
    pub word_probs: Var,
    /// Distinct unmasked document ids, ascending.
    pub words: Vec<u32>,
}

impl SampleGraph {
    pub fn word_index(&self, id: u32) -> Option<usize> {
        self.words.binary_search(&id).ok()
    }

    pub fn to_map(&self, tape: &Tape<'_>) -> AttentionMap {
        let alpha = self.alpha.map(|a| {
            let t = tape.value(a);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        });
        AttentionMap {
            alpha,
            merged: tape.data(self.merged).to_vec(),
            word_probs: self
                .words
                .iter()
                .copied()
                .zip(tape.data(self.word_probs).iter().copied())
                .collect(),
        }
    }
}

fn check_input(input: &SampleInput<'_>) -> Result<()> {
    if input.doc.len() != input.doc_mask.len() || input.query.len() != input.query_mask.len() {
        return Err(Error::Usage(format!(
            "mask lengths must match sequences (doc {}/{}, query {}/{})",
            input.doc.len(),
            input.doc_mask.len(),
            input.query.len(),
            input.query_mask.len()
        )));
    }
    Ok(())
}

fn gather_ids(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|&i| i as usize).collect()
}

/// Records the full reader for one sample. Dropout is applied to both GRU
/// outputs when `rng` is given and the configured rate is positive.
pub fn record_sample<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    vars: &ModelVars,
    config: &ModelConfig,
    mode: ReaderMode,
    input: SampleInput<'_>,
    mut rng: Option<&mut R>,
) -> Result<SampleGraph> {
    check_input(&input)?;
    let doc_emb = tape.gather_rows(vars.embedding, &gather_ids(input.doc))?;
    let query_emb = tape.gather_rows(vars.embedding, &gather_ids(input.query))?;
    let mut h_doc = record_bigru(tape, doc_emb, &vars.doc_fwd, &vars.doc_bwd, input.doc_mask)?;
    let mut h_query = record_bigru(tape, query_emb, &vars.query_fwd, &vars.query_bwd, input.query_mask)?;
    if let Some(rng) = rng.as_deref_mut() {
        h_doc = record_dropout(tape, h_doc, config.dropout_rate, Some(&mut *rng))?;
        h_query = record_dropout(tape, h_query, config.dropout_rate, Some(&mut *rng))?;
    }

    let live: Vec<usize> = (0..input.query.len()).filter(|&t| input.query_mask[t]).collect();
    let (alpha, merged) = match mode.merge() {
        Some(merge) => {
            // Padded query rows are zero and would add uniform rows to the merge.
            let q = tape.gather_rows(h_query, &live)?;
            let alpha = record_attention_per_step(tape, h_doc, q, input.doc_mask)?;
            (Some(alpha), record_merge(tape, alpha, merge, input.doc_mask)?)
        }
        None => {
            let d = config.hidden_dim;
            let first = *live.first().expect("bigru rejects fully masked queries");
            let last = *live.last().expect("bigru rejects fully masked queries");
            let last_row = tape.row(h_query, last)?;
            let fwd = tape.slice_cols(last_row, 0, d)?;
            let first_row = tape.row(h_query, first)?;
            let bwd = tape.slice_cols(first_row, d, 2 * d)?;
            let query_final = tape.concat_cols(fwd, bwd)?;
            (None, record_as_attention(tape, h_doc, query_final, input.doc_mask)?)
        }
    };

    let mut words: Vec<u32> = input
        .doc
        .iter()
        .zip(input.doc_mask)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| id)
        .collect();
    words.sort_unstable();
    words.dedup();
    let segments: Vec<Option<usize>> = input
        .doc
        .iter()
        .zip(input.doc_mask)
        .map(|(id, &m)| if m { words.binary_search(id).ok() } else { None })
        .collect();
    let word_probs = tape.segment_sum(merged, &segments, words.len())?;
    Ok(SampleGraph {
        alpha,
        merged,
        word_probs,
        words,
    })
}

/// Forward pass for one sample, with dropout when `rng` is given.
pub fn forward_sample<R: Rng + ?Sized>(
    params: &ModelParams,
    mode: ReaderMode,
    input: SampleInput<'_>,
    rng: Option<&mut R>,
) -> Result<AttentionMap> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let graph = record_sample(&mut tape, &vars, &params.config, mode, input, rng)?;
    Ok(graph.to_map(&tape))
}

/// Evaluation-mode forward pass over a batch, one map per sample in order.
pub fn forward(
    params: &ModelParams,
    mode: ReaderMode,
    batch: &[SampleInput<'_>],
    exec: Execution,
) -> Result<Vec<AttentionMap>> {
    exec.map(batch, |_, input| {
        forward_sample::<rand_chacha::ChaCha8Rng>(params, mode, *input, None)
    })
    .into_iter()
    .collect()
}

/// Argmax over `word_probs`, ties to the smallest id.
pub fn predict(map: &AttentionMap) -> Result<u32> {
    let mut best: Option<(u32, f64)> = None;
    for (&id, &p) in &map.word_probs {
        if best.is_none_or(|(_, b)| p > b) {
            best = Some((id, p));
        }
    }
    best.map(|(id, _)| id).ok_or(Error::EmptySupport)
}

/// Like [`predict`] but only over `candidates`; a candidate missing from the
/// document scores zero. An empty candidate list means no restriction.
pub fn predict_from(map: &AttentionMap, candidates: &[u32]) -> Result<u32> {
    if candidates.is_empty() {
        return predict(map);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = (sorted[0], f64::NEG_INFINITY);
    for id in sorted {
        let p = map.word_probs.get(&id).copied().unwrap_or(0.0);
        if p > best.1 {
            best = (id, p);
        }
    }
    Ok(best.0)
}
