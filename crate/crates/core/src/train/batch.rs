use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::reader::SampleInput;
use crate::vocab::{EncodedSample, PAD_ID};

/// Right-padded mini-batch. Masks are `true` exactly at real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub doc_ids: Vec<Vec<u32>>,
    pub doc_mask: Vec<Vec<bool>>,
    pub query_ids: Vec<Vec<u32>>,
    pub query_mask: Vec<Vec<bool>>,
    pub answer_ids: Vec<u32>,
    /// Position of each row in the sample list the batch was drawn from.
    pub sample_index: Vec<usize>,
}

fn pad(seqs: &[&[u32]]) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.to_vec();
            let mut mask = vec![true; s.len()];
            ids.resize(width, PAD_ID);
            mask.resize(width, false);
            (ids, mask)
        })
        .unzip()
}

impl Batch {
    pub fn from_samples(samples: &[EncodedSample], indices: &[usize]) -> Self {
        let docs: Vec<&[u32]> = indices.iter().map(|&i| samples[i].doc.as_slice()).collect();
        let queries: Vec<&[u32]> = indices.iter().map(|&i| samples[i].query.as_slice()).collect();
        let (doc_ids, doc_mask) = pad(&docs);
        let (query_ids, query_mask) = pad(&queries);
        Batch {
            doc_ids,
            doc_mask,
            query_ids,
            query_mask,
            answer_ids: indices.iter().map(|&i| samples[i].answer).collect(),
            sample_index: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.answer_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answer_ids.is_empty()
    }

    pub fn inputs(&self) -> Vec<SampleInput<'_>> {
        (0..self.len())
            .map(|r| SampleInput::new(&self.doc_ids[r], &self.query_ids[r], &self.doc_mask[r], &self.query_mask[r]))
            .collect()
    }
}

/// Fails on the first sample whose answer id is not among its document ids.
pub fn check_trainable(samples: &[EncodedSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if !s.doc.contains(&s.answer) {
            return Err(Error::Validation {
                line: i + 1,
                message: format!("sample {i}: answer id {} does not occur in its document", s.answer),
            });
        }
    }
    Ok(())
}

/// Shuffles `samples` with `rng` and groups them into padded batches of
/// `batch_size`; the last batch may be smaller.
pub fn make_batches<R: Rng + ?Sized>(samples: &[EncodedSample], batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    check_trainable(samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(|c| Batch::from_samples(samples, c)).collect())
}
